use serde::{Deserialize, Serialize};

use super::sigmoid;
use crate::error::{Error, Result};

/// Boosting hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BtHyper {
    pub rounds: usize,
    pub depth: usize,
    pub lr: f64,
    /// L2 penalty on leaf scores.
    pub lambda: f64,
    /// Minimum hessian sum per child.
    pub min_child_weight: f64,
    /// Unused while subsampling is off; kept so runs are fully described.
    pub seed: u64,
}

impl Default for BtHyper {
    fn default() -> Self {
        BtHyper {
            rounds: 100,
            depth: 4,
            lr: 0.1,
            lambda: 1.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// `x[feature] < threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

/// A regression tree stored as a node arena; node 0 is the root. Leaf
/// scores already include the learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    fn scale_leaves(&mut self, by: f64) {
        for n in &mut self.nodes {
            if let Node::Leaf(v) = n {
                *v *= by;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtEnsemble {
    pub trees: Vec<Tree>,
    pub base_score: f64,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub n_features: usize,
    /// Set when training saw a single class; the model returns the prior.
    pub degenerate: bool,
}

impl BtEnsemble {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.score(x)).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtTraining {
    pub ensemble: BtEnsemble,
    /// Training log-loss after 0, 1, ..., rounds trees.
    pub train_logloss: Vec<f64>,
}

/// Violation probability `sigmoid(base + Σ tree scores)`.
pub fn bt_predict(ensemble: &BtEnsemble, x: &[f64]) -> Result<f64> {
    if x.len() != ensemble.n_features {
        return Err(Error::input(format!(
            "feature vector has {} entries, ensemble expects {}",
            x.len(),
            ensemble.n_features
        )));
    }
    Ok(sigmoid(ensemble.margin(x)))
}

fn logloss(margins: &[f64], labels: &[u8]) -> f64 {
    let n = margins.len() as f64;
    margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| {
            // log(1 + e^-m) for y = 1, log(1 + e^m) for y = 0
            let z = if y == 1 { -m } else { m };
            if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            }
        })
        .sum::<f64>()
        / n
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    sorted: &'a [Vec<u32>],
    hyper: &'a BtHyper,
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    /// Grows one tree level by level. `node_of[i]` tracks which open leaf
    /// sample `i` sits in.
    fn grow(&self, g: &[f64], h: &[f64]) -> Tree {
        let n = g.len();
        let lambda = self.hyper.lambda;
        let mut nodes = vec![Node::Leaf(0.0)];
        let mut node_of = vec![0usize; n];
        let mut open: Vec<usize> = vec![0];

        for _level in 0..self.hyper.depth {
            if open.is_empty() {
                break;
            }
            // slot per open node
            let mut slot = vec![usize::MAX; nodes.len()];
            for (k, &node) in open.iter().enumerate() {
                slot[node] = k;
            }
            let mut gsum = vec![0.0; open.len()];
            let mut hsum = vec![0.0; open.len()];
            for i in 0..n {
                let s = slot[node_of[i]];
                if s != usize::MAX {
                    gsum[s] += g[i];
                    hsum[s] += h[i];
                }
            }
            let mut best: Vec<Option<Best>> = vec![None; open.len()];
            let mut gl = vec![0.0; open.len()];
            let mut hl = vec![0.0; open.len()];
            let mut last = vec![f64::NAN; open.len()];
            for (f, order) in self.sorted.iter().enumerate() {
                gl.iter_mut().for_each(|v| *v = 0.0);
                hl.iter_mut().for_each(|v| *v = 0.0);
                last.iter_mut().for_each(|v| *v = f64::NAN);
                for &i in order {
                    let i = i as usize;
                    let s = slot[node_of[i]];
                    if s == usize::MAX {
                        continue;
                    }
                    let v = self.x[i][f];
                    if !last[s].is_nan() && v > last[s] {
                        let (lg, lh) = (gl[s], hl[s]);
                        let (rg, rh) = (gsum[s] - lg, hsum[s] - lh);
                        if lh >= self.hyper.min_child_weight && rh >= self.hyper.min_child_weight {
                            let gain = lg * lg / (lh + lambda) + rg * rg / (rh + lambda)
                                - gsum[s] * gsum[s] / (hsum[s] + lambda);
                            if gain > 1e-12 && best[s].is_none_or(|b| gain > b.gain) {
                                best[s] = Some(Best {
                                    gain,
                                    feature: f,
                                    threshold: 0.5 * (last[s] + v),
                                });
                            }
                        }
                    }
                    gl[s] += g[i];
                    hl[s] += h[i];
                    last[s] = v;
                }
            }

            let mut next_open = Vec::new();
            let mut children = vec![(usize::MAX, usize::MAX); open.len()];
            for (k, &node) in open.iter().enumerate() {
                if let Some(b) = best[k] {
                    let left = nodes.len();
                    nodes.push(Node::Leaf(0.0));
                    nodes.push(Node::Leaf(0.0));
                    nodes[node] = Node::Split {
                        feature: b.feature,
                        threshold: b.threshold,
                        left,
                        right: left + 1,
                    };
                    children[k] = (left, left + 1);
                    next_open.push(left);
                    next_open.push(left + 1);
                }
            }
            for i in 0..n {
                let s = slot[node_of[i]];
                if s == usize::MAX || children[s].0 == usize::MAX {
                    continue;
                }
                if let Node::Split { feature, threshold, .. } = nodes[node_of[i]] {
                    node_of[i] = if self.x[i][feature] < threshold {
                        children[s].0
                    } else {
                        children[s].1
                    };
                }
            }
            open = next_open;
        }

        // leaf values from the final assignment
        let mut gsum = vec![0.0; nodes.len()];
        let mut hsum = vec![0.0; nodes.len()];
        for i in 0..n {
            gsum[node_of[i]] += g[i];
            hsum[node_of[i]] += h[i];
        }
        for (k, node) in nodes.iter_mut().enumerate() {
            if let Node::Leaf(v) = node {
                *v = -gsum[k] / (hsum[k] + lambda) * self.hyper.lr;
            }
        }
        Tree { nodes }
    }
}

/// Second-order gradient boosting on the logistic loss.
///
/// A tree that would raise the training loss has its leaves halved (up to
/// ten times) and is zeroed otherwise, so the recorded log-loss never
/// increases from one round to the next.
pub fn bt_train(latents: &[Vec<f64>], labels: &[u8], hyper: &BtHyper) -> Result<BtTraining> {
    if latents.is_empty() || latents.len() != labels.len() {
        return Err(Error::input(format!(
            "{} feature rows for {} labels",
            latents.len(),
            labels.len()
        )));
    }
    let d = latents[0].len();
    if latents.iter().any(|r| r.len() != d) {
        return Err(Error::input("ragged feature rows"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::input("labels must be 0 or 1"));
    }
    if latents.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite feature value"));
    }
    let n = labels.len();
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let prior = (positives as f64 / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let base_score = (prior / (1.0 - prior)).ln();
    let degenerate = positives == 0 || positives == n;
    let mut ensemble = BtEnsemble {
        trees: Vec::new(),
        base_score,
        learning_rate: hyper.lr,
        max_depth: hyper.depth,
        n_features: d,
        degenerate,
    };
    let mut margins = vec![base_score; n];
    let mut history = vec![logloss(&margins, labels)];
    if degenerate {
        return Ok(BtTraining {
            ensemble,
            train_logloss: history,
        });
    }

    let sorted: Vec<Vec<u32>> = (0..d)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| latents[a as usize][f].total_cmp(&latents[b as usize][f]));
            idx
        })
        .collect();
    let grower = Grower {
        x: latents,
        sorted: &sorted,
        hyper,
    };
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut trial = vec![0.0; n];
    for _round in 0..hyper.rounds {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            g[i] = p - f64::from(labels[i]);
            h[i] = (p * (1.0 - p)).max(1e-16);
        }
        let mut tree = grower.grow(&g, &h);
        let before = *history.last().expect("history starts non-empty");
        let mut after = f64::INFINITY;
        for _ in 0..=10 {
            for i in 0..n {
                trial[i] = margins[i] + tree.score(&latents[i]);
            }
            after = logloss(&trial, labels);
            if after <= before {
                break;
            }
            tree.scale_leaves(0.5);
        }
        if after > before {
            tree.scale_leaves(0.0);
            after = before;
        } else {
            margins.copy_from_slice(&trial);
        }
        ensemble.trees.push(tree);
        history.push(after);
    }
    Ok(BtTraining {
        ensemble,
        train_logloss: history,
    })
}
