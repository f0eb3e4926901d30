//! Gradient-boosted trees on binomial log-loss with histogram splits.

use crate::glm::{expit, logit};
use crate::matrix::Matrix;

const MAX_BINS: usize = 64;
const MIN_CHILD_HESSIAN: f64 = 1.0;
const LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostParams {
    pub depth: usize,
    pub shrinkage: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf(v) => return *v,
                Node::Split { feature, threshold, left, right } => {
                    k = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostedModel {
    base: f64,
    shrinkage: f64,
    trees: Vec<Tree>,
}

impl BoostedModel {
    pub fn raw(&self, row: &[f64]) -> f64 {
        self.base + self.shrinkage * self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        (0..x.rows()).map(|i| expit(self.raw(x.row(i)))).collect()
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

/// Per-feature cut points; `bin(v)` is the number of cuts strictly below
/// `v`, so `v <= cuts[b]` exactly when `bin(v) <= b`.
struct Binned {
    cuts: Vec<Vec<f64>>,
    bins: Vec<Vec<u8>>,
}

fn cut_points(values: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut uniq = sorted.clone();
    uniq.dedup();
    if uniq.len() <= 1 {
        return Vec::new();
    }
    if uniq.len() <= MAX_BINS {
        return uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let n = sorted.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(MAX_BINS);
    for k in 1..MAX_BINS {
        let i = (k * n) / MAX_BINS;
        let v = sorted[i.min(n - 1)];
        // Cut just above v, halfway to the next distinct value.
        let next = uniq.partition_point(|u| *u <= v);
        if next >= uniq.len() {
            break;
        }
        let c = 0.5 * (v + uniq[next]);
        if cuts.last().is_none_or(|last| c > *last) {
            cuts.push(c);
        }
    }
    cuts
}

fn bin_features(x: &Matrix) -> Binned {
    let p = x.cols();
    let mut cuts = Vec::with_capacity(p);
    let mut bins = Vec::with_capacity(p);
    for j in 0..p {
        let col = x.column(j);
        let c = cut_points(&col);
        bins.push(col.iter().map(|v| c.partition_point(|t| t < v) as u8).collect());
        cuts.push(c);
    }
    Binned { cuts, bins }
}

#[derive(Clone)]
struct Hist {
    g: Vec<f64>,
    h: Vec<f64>,
}

struct Grower<'a> {
    data: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    depth: usize,
    nodes: Vec<Node>,
    /// Leaf value reached by each row, filled as leaves are created.
    row_value: Vec<f64>,
}

impl Grower<'_> {
    fn histograms(&self, rows: &[usize]) -> Vec<Hist> {
        self.data
            .bins
            .iter()
            .zip(&self.data.cuts)
            .map(|(bins, cuts)| {
                let mut hist = Hist { g: vec![0.0; cuts.len() + 1], h: vec![0.0; cuts.len() + 1] };
                for &i in rows {
                    let b = bins[i] as usize;
                    hist.g[b] += self.grad[i];
                    hist.h[b] += self.hess[i];
                }
                hist
            })
            .collect()
    }

    fn leaf(&mut self, rows: &[usize], g: f64, h: f64) -> usize {
        let v = -g / (h + LAMBDA);
        for &i in rows {
            self.row_value[i] = v;
        }
        self.nodes.push(Node::Leaf(v));
        self.nodes.len() - 1
    }

    /// Grow a subtree over `rows` whose per-feature histograms are `hists`.
    fn grow(&mut self, rows: Vec<usize>, hists: Vec<Hist>, level: usize) -> usize {
        let (g_tot, h_tot) = hists
            .first()
            .map(|h| (h.g.iter().sum::<f64>(), h.h.iter().sum::<f64>()))
            .unwrap_or_else(|| (rows.iter().map(|&i| self.grad[i]).sum(), rows.iter().map(|&i| self.hess[i]).sum()));
        if level == self.depth {
            return self.leaf(&rows, g_tot, h_tot);
        }
        let parent = g_tot * g_tot / (h_tot + LAMBDA);
        let mut best: Option<(f64, usize, usize)> = None;
        for (j, hist) in hists.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            for b in 0..hist.g.len().saturating_sub(1) {
                gl += hist.g[b];
                hl += hist.h[b];
                let (gr, hr) = (g_tot - gl, h_tot - hl);
                if hl < MIN_CHILD_HESSIAN || hr < MIN_CHILD_HESSIAN {
                    continue;
                }
                let gain = gl * gl / (hl + LAMBDA) + gr * gr / (hr + LAMBDA) - parent;
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, j, b));
                }
            }
        }
        let Some((_, feature, bin)) = best else {
            return self.leaf(&rows, g_tot, h_tot);
        };
        let bins = &self.data.bins[feature];
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| (bins[i] as usize) <= bin);
        let (left_h, right_h) = if level + 1 == self.depth {
            (Vec::new(), Vec::new())
        } else if left_rows.len() <= right_rows.len() {
            let small = self.histograms(&left_rows);
            let big = subtract(&hists, &small);
            (small, big)
        } else {
            let small = self.histograms(&right_rows);
            let big = subtract(&hists, &small);
            (big, small)
        };
        let threshold = self.data.cuts[feature][bin];
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf(0.0));
        let left = if left_h.is_empty() { self.leaf_of(&left_rows) } else { self.grow(left_rows, left_h, level + 1) };
        let right = if right_h.is_empty() { self.leaf_of(&right_rows) } else { self.grow(right_rows, right_h, level + 1) };
        self.nodes[at] = Node::Split { feature, threshold, left, right };
        at
    }

    fn leaf_of(&mut self, rows: &[usize]) -> usize {
        let g = rows.iter().map(|&i| self.grad[i]).sum();
        let h = rows.iter().map(|&i| self.hess[i]).sum();
        self.leaf(rows, g, h)
    }
}

fn subtract(parent: &[Hist], child: &[Hist]) -> Vec<Hist> {
    parent
        .iter()
        .zip(child)
        .map(|(p, c)| Hist {
            g: p.g.iter().zip(&c.g).map(|(a, b)| a - b).collect(),
            h: p.h.iter().zip(&c.h).map(|(a, b)| a - b).collect(),
        })
        .collect()
}

/// Fit on rows with positive weight. `y` must be 0/1 and not constant.
pub fn fit_boosted(x: &Matrix, y: &[f64], w: &[f64], params: BoostParams) -> BoostedModel {
    let rows: Vec<usize> = (0..x.rows()).filter(|&i| w[i] > 0.0).collect();
    let xs = x.select_rows(&rows);
    let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let ws: Vec<f64> = rows.iter().map(|&i| w[i]).collect();
    let n = rows.len();
    let data = bin_features(&xs);
    let wsum: f64 = ws.iter().sum();
    let mean = ys.iter().zip(&ws).map(|(a, b)| a * b).sum::<f64>() / wsum;
    let base = logit(mean.clamp(1e-6, 1.0 - 1e-6));
    let mut raw = vec![base; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let all: Vec<usize> = (0..n).collect();
    let mut trees = Vec::with_capacity(params.rounds);
    for _ in 0..params.rounds {
        for i in 0..n {
            let p = expit(raw[i]);
            grad[i] = ws[i] * (p - ys[i]);
            hess[i] = ws[i] * (p * (1.0 - p)).max(1e-12);
        }
        let mut grower =
            Grower { data: &data, grad: &grad, hess: &hess, depth: params.depth, nodes: Vec::new(), row_value: vec![0.0; n] };
        let hists = if params.depth == 0 { Vec::new() } else { grower.histograms(&all) };
        grower.grow(all.clone(), hists, 0);
        for (r, v) in raw.iter_mut().zip(&grower.row_value) {
            *r += params.shrinkage * v;
        }
        trees.push(Tree { nodes: grower.nodes });
    }
    BoostedModel { base, shrinkage: params.shrinkage, trees }
}
