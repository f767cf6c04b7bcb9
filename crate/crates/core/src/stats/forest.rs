//! Bagged CART ensemble with random feature subsets (random forest).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf {
        /// Fraction of positive bootstrap samples in the leaf.
        positive: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn vote(&self, x: &[f64]) -> f64 {
        match self {
            Node::Leaf { positive } => match positive.partial_cmp(&0.5) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            },
            Node::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.vote(x)
                } else {
                    right.vote(x)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    trees: Vec<Node>,
    n_features: usize,
    /// Set when training saw a single class; every prediction is that class.
    pub constant: Option<bool>,
}

impl RandomForest {
    /// Fraction of trees voting positive (a tied leaf casts half a vote).
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        if let Some(c) = self.constant {
            return f64::from(u8::from(c));
        }
        self.trees.iter().map(|t| t.vote(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let q = pos as f64 / n as f64;
    2.0 * q * (1.0 - q)
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    mtry: usize,
}

impl Builder<'_> {
    fn grow(&self, idx: &mut [usize], rng: &mut ChaCha8Rng) -> Node {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        if pos == 0 || pos == n || n < 2 {
            return Node::Leaf { positive: pos as f64 / n.max(1) as f64 };
        }
        let p = self.x[0].len();
        let parent = gini(pos, n);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(n);
        for feature in sample(rng, p, self.mtry.min(p)).into_iter() {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.x[i][feature], self.y[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for s in 1..n {
                left_pos += usize::from(pairs[s - 1].1);
                if pairs[s].0 == pairs[s - 1].0 {
                    continue;
                }
                let impurity = (s as f64 * gini(left_pos, s) + (n - s) as f64 * gini(pos - left_pos, n - s)) / n as f64;
                let gain = parent - impurity;
                if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, feature, 0.5 * (pairs[s - 1].0 + pairs[s].0)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return Node::Leaf { positive: pos as f64 / n as f64 };
        };
        let mut split = 0;
        for k in 0..n {
            if self.x[idx[k]][feature] <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        Node::Split {
            feature,
            threshold,
            left: Box::new(self.grow(l, rng)),
            right: Box::new(self.grow(r, rng)),
        }
    }
}

/// Trains `n_trees` Gini CART trees on bootstrap resamples, each split
/// drawing `ceil(sqrt(p))` candidate features. Nodes split until pure or
/// down to one sample. Tree `t` draws from ChaCha8 stream `t` of `seed`, so
/// the forest is identical regardless of thread scheduling.
pub fn rf_train(x: &[Vec<f64>], y: &[bool], n_trees: usize, seed: u64) -> Result<RandomForest> {
    if n_trees == 0 {
        return Err(Error::Config("n_trees must be >= 1".into()));
    }
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(Error::Shape(format!("{} rows vs {} labels", n, y.len())));
    }
    let p = x[0].len();
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::Shape("ragged design matrix".into()));
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == n || p == 0 {
        let majority = 2 * pos >= n;
        return Ok(RandomForest { trees: Vec::new(), n_features: p, constant: Some(majority) });
    }
    let mtry = (p as f64).sqrt().ceil() as usize;
    let builder = Builder { x, y, mtry };
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            builder.grow(&mut idx, &mut rng)
        })
        .collect();
    Ok(RandomForest { trees, n_features: p, constant: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let y = x.iter().map(|r| r[0] + 0.5 * r[1] > 0.0).collect();
        (x, y)
    }

    #[test]
    fn fits_linearly_separable_data() {
        let (x, y) = separable(100, 1);
        let rf = rf_train(&x, &y, 200, 7).unwrap();
        let correct = x.iter().zip(&y).filter(|(r, &l)| (rf.predict_proba(r) >= 0.5) == l).count();
        assert!(correct as f64 / 100.0 >= 0.98, "{correct}");
    }

    #[test]
    fn same_seed_same_model() {
        let (x, y) = separable(50, 2);
        assert_eq!(rf_train(&x, &y, 20, 3).unwrap(), rf_train(&x, &y, 20, 3).unwrap());
        assert_ne!(rf_train(&x, &y, 20, 3).unwrap(), rf_train(&x, &y, 20, 4).unwrap());
    }

    #[test]
    fn single_class_is_constant() {
        let (x, _) = separable(10, 3);
        let rf = rf_train(&x, &[false; 10], 5, 0).unwrap();
        assert_eq!(rf.constant, Some(false));
        assert_eq!(rf.predict_proba(&x[0]), 0.0);
        assert!(rf_train(&x, &[false; 10], 0, 0).is_err());
    }

    #[test]
    fn probabilities_in_unit_interval() {
        let (x, y) = separable(30, 4);
        let rf = rf_train(&x, &y, 15, 1).unwrap();
        assert_eq!(rf.n_trees(), 15);
        assert!(x.iter().all(|r| (0.0..=1.0).contains(&rf.predict_proba(r))));
    }
}
