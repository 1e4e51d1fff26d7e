use serde::{Deserialize, Serialize};

use super::LanguageVectorBank;
use crate::error::{Error, Result};

/// One agglomeration step. Leaves are clusters `0..n` in bank order; the
/// cluster created by merge `k` gets id `n + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub layer: usize,
    pub metric: String,
    pub linkage: String,
    pub leaves: Vec<String>,
    pub merges: Vec<Merge>,
}

// Distances closer than this (relative) count as ties and fall back to the
// lexicographically smallest cluster pair.
const TIE_TOL: f64 = 1e-12;

pub(crate) fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

pub(crate) fn is_better(candidate: f64, best: f64) -> bool {
    candidate < best - TIE_TOL * best.abs().max(1.0)
}

/// Average-linkage agglomerative clustering of raw vectors under cosine
/// distance.
pub fn average_linkage(labels: Vec<String>, points: &[Vec<f64>]) -> Result<Vec<Merge>> {
    let n = points.len();
    if n < 2 {
        return Err(crate::Error::InsufficientLanguages { needed: 2, found: n });
    }
    for (label, p) in labels.iter().zip(points) {
        if p.iter().map(|x| x * x).sum::<f64>() == 0.0 {
            return Err(Error::DegenerateVectors(label.clone()));
        }
    }
    let total = 2 * n - 1;
    // sums[a][b]: sum of leaf-pair distances between clusters a and b
    let mut sums = vec![vec![0.0f64; total]; total];
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine_distance(&points[i], &points[j]);
            sums[i][j] = d;
            sums[j][i] = d;
        }
    }
    let mut size = vec![0usize; total];
    size[..n].iter_mut().for_each(|s| *s = 1);
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<(usize, usize, f64)> = None;
        for (x, &a) in active.iter().enumerate() {
            for &b in &active[x + 1..] {
                let avg = sums[a][b] / (size[a] * size[b]) as f64;
                if best.is_none_or(|(_, _, d)| is_better(avg, d)) {
                    best = Some((a, b, avg));
                }
            }
        }
        let (a, b, distance) = best.expect("at least two active clusters");
        let k = n + step;
        size[k] = size[a] + size[b];
        for &c in &active {
            if c != a && c != b {
                let s = sums[a][c] + sums[b][c];
                sums[k][c] = s;
                sums[c][k] = s;
            }
        }
        active.retain(|&c| c != a && c != b);
        active.push(k);
        merges.push(Merge {
            a,
            b,
            distance,
            size: size[k],
        });
    }
    Ok(merges)
}

/// Cluster the language representations of `layer` (default: last layer).
pub fn cluster_languages(bank: &LanguageVectorBank, layer: Option<usize>) -> Result<Dendrogram> {
    let layer = layer.unwrap_or(bank.n_layers());
    let labels: Vec<String> = bank.codes().iter().map(|c| c.to_string()).collect();
    let points = labels
        .iter()
        .map(|c| {
            bank.language_representation(c, layer)
                .map(|r| r.into_iter().map(f64::from).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let merges = average_linkage(labels.clone(), &points)?;
    Ok(Dendrogram {
        layer,
        metric: "cosine".into(),
        linkage: "average".into(),
        leaves: labels,
        merges,
    })
}

impl Dendrogram {
    /// Leaf labels below cluster `id`, in merge order.
    pub fn members(&self, id: usize) -> Vec<&str> {
        let n = self.leaves.len();
        if id < n {
            return vec![self.leaves[id].as_str()];
        }
        let m = &self.merges[id - n];
        let mut out = self.members(m.a);
        out.extend(self.members(m.b));
        out
    }

    /// Sideways tree, root at the left.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        if self.merges.is_empty() {
            for l in &self.leaves {
                out.push_str(l);
                out.push('\n');
            }
            return out;
        }
        let root = self.leaves.len() + self.merges.len() - 1;
        self.render_node(root, "", true, true, &mut out);
        out
    }

    fn render_node(&self, id: usize, prefix: &str, last: bool, root: bool, out: &mut String) {
        let n = self.leaves.len();
        let branch = if root {
            ""
        } else if last {
            "└── "
        } else {
            "├── "
        };
        if id < n {
            out.push_str(&format!("{prefix}{branch}{}\n", self.leaves[id]));
            return;
        }
        let m = &self.merges[id - n];
        out.push_str(&format!("{prefix}{branch}[{:.4}]\n", m.distance));
        let child_prefix = if root {
            String::new()
        } else {
            format!("{prefix}{}", if last { "    " } else { "│   " })
        };
        self.render_node(m.a, &child_prefix, false, false, out);
        self.render_node(m.b, &child_prefix, true, false, out);
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::bank_from;
    use super::*;

    #[test]
    fn planted_pairs_merge_first() {
        let pts = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.9, 0.1],
        ];
        let labels = (1..=4).map(|i| i.to_string()).collect();
        let m = average_linkage(labels, &pts).unwrap();
        assert_eq!((m[0].a, m[0].b), (0, 1));
        assert_eq!((m[1].a, m[1].b), (2, 3));
        assert_eq!((m[2].a, m[2].b), (4, 5));
        assert!(m.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn two_languages_single_merge() {
        let b = bank_from(&[("a", vec![vec![1.0, 0.0]]), ("b", vec![vec![-1.0, 0.2]])]);
        let d = cluster_languages(&b, None).unwrap();
        assert_eq!(d.merges.len(), 1);
        assert_eq!(d.members(2), vec!["a", "b"]);
        assert!(d.render_text().contains("a"));
    }

    #[test]
    fn zero_representation_is_degenerate() {
        // c = (1, 1, 0); r of "b" is zero
        let b = bank_from(&[
            ("a", vec![vec![2.0, 0.0, 0.0]]),
            ("b", vec![vec![1.0, 1.0, 0.0]]),
            ("c", vec![vec![0.0, 2.0, 0.0]]),
        ]);
        assert!(matches!(cluster_languages(&b, None), Err(Error::DegenerateVectors(c)) if c == "b"));
    }

    #[test]
    fn ties_choose_smallest_pair() {
        // square: every adjacent pair is equidistant
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        let m = average_linkage((0..4).map(|i| i.to_string()).collect(), &pts).unwrap();
        assert_eq!((m[0].a, m[0].b), (0, 1));
        assert_eq!((m[1].a, m[1].b), (2, 3));
    }
}
