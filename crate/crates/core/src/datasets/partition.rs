//! Client partitioning: iid, Dirichlet label skew, and quantity-based shards.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::substream;

/// How samples are spread across clients. The scheme-specific knobs live on
/// the variant, so a config can never carry, say, an alpha for an iid split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum PartitionScheme {
    Iid,
    /// Per-client class proportions drawn from Dir(alpha * 1_Q).
    Dirichlet { alpha: f64 },
    /// Sort by label, cut into gamma*N shards, deal gamma shards per client.
    Quantity { gamma: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    #[serde(flatten)]
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    pub seed: u64,
}

/// A disjoint assignment of dataset indices to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub config: PartitionConfig,
    /// One ordered index list per client.
    pub assignments: Vec<Vec<usize>>,
    /// N x Q label counts.
    pub label_histograms: Vec<Vec<usize>>,
    /// Samples per client that had to be re-sourced from other classes when a
    /// Dirichlet draw requested more of a class than remained available.
    pub repair_counts: Vec<usize>,
    /// Size of the dataset the plan was built from.
    pub dataset_len: usize,
}

impl PartitionPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PartitionPlan> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Split `total` into integer parts proportional to `weights` using the
/// largest-remainder rule (ties broken toward lower index).
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        // degenerate weights: spread evenly
        let base = total / weights.len();
        let mut out = vec![base; weights.len()];
        for item in out.iter_mut().take(total - base * weights.len()) {
            *item += 1;
        }
        return out;
    }
    let shares: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        out[i] += 1;
    }
    out
}

/// Build a partition plan. Every scheme gives clients an equal number of
/// samples (floor(M/N) for iid/dirichlet, gamma*floor(M/(gamma*N)) for
/// quantity); leftover samples are dropped.
pub fn partition(dataset: &LabeledDataset, config: &PartitionConfig) -> Result<PartitionPlan> {
    let m = dataset.len();
    let n = config.num_clients;
    let q = dataset.num_classes;
    if n == 0 {
        return Err(Error::Config("num_clients must be >= 1".into()));
    }
    if n > m {
        return Err(Error::Config(format!(
            "cannot partition {m} samples across {n} clients"
        )));
    }

    let mut rng = substream(config.seed, "partition", &[]);
    let mut repair_counts = vec![0usize; n];

    let assignments: Vec<Vec<usize>> = match config.scheme {
        PartitionScheme::Iid => {
            let mut indices: Vec<usize> = (0..m).collect();
            indices.shuffle(&mut rng);
            let size = m / n;
            (0..n).map(|i| indices[i * size..(i + 1) * size].to_vec()).collect()
        }
        PartitionScheme::Dirichlet { alpha } => {
            if !(alpha > 0.0) || !alpha.is_finite() {
                return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
            }
            let size = m / n;
            // per-class pools, shuffled once; we pop from the back
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); q];
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            for &i in &order {
                pools[dataset.labels[i]].push(i);
            }
            let gamma_dist = Gamma::new(alpha, 1.0)
                .map_err(|e| Error::Config(format!("bad alpha for Dirichlet: {e}")))?;
            let mut out = Vec::with_capacity(n);
            for client in 0..n {
                // Dirichlet draw via normalized Gammas
                let mut props: Vec<f64> = (0..q).map(|_| gamma_dist.sample(&mut rng)).collect();
                if props.iter().sum::<f64>() <= 0.0 {
                    // vanishing Gamma draws at extreme alpha: pick a single class
                    let c = rng.gen_range(0..q);
                    props = vec![0.0; q];
                    props[c] = 1.0;
                }
                let want = apportion(&props, size);
                // availability repair: move any shortfall to classes that still
                // have samples, proportionally to what remains
                let mut take: Vec<usize> =
                    want.iter().zip(&pools).map(|(&w, p)| w.min(p.len())).collect();
                let mut deficit = size - take.iter().sum::<usize>();
                repair_counts[client] = deficit;
                while deficit > 0 {
                    let remaining: Vec<f64> = pools
                        .iter()
                        .zip(&take)
                        .map(|(p, &t)| (p.len() - t) as f64)
                        .collect();
                    let total_remaining: f64 = remaining.iter().sum();
                    if total_remaining <= 0.0 {
                        return Err(Error::Config(
                            "dirichlet partition ran out of samples; reduce clients".into(),
                        ));
                    }
                    let extra = apportion(&remaining, deficit);
                    for c in 0..q {
                        let add = extra[c].min(pools[c].len() - take[c]);
                        take[c] += add;
                        deficit -= add;
                    }
                }
                let mut mine = Vec::with_capacity(size);
                for c in 0..q {
                    for _ in 0..take[c] {
                        mine.push(pools[c].pop().expect("availability checked above"));
                    }
                }
                out.push(mine);
            }
            out
        }
        PartitionScheme::Quantity { gamma } => {
            if gamma == 0 {
                return Err(Error::Config("gamma must be >= 1".into()));
            }
            let num_shards = gamma * n;
            let shard_size = m / num_shards;
            if shard_size == 0 {
                return Err(Error::Config(format!(
                    "quantity scheme with {num_shards} shards over {m} samples leaves empty shards"
                )));
            }
            // stable sort by label keeps index order within a class
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by_key(|&i| dataset.labels[i]);
            let mut shard_ids: Vec<usize> = (0..num_shards).collect();
            shard_ids.shuffle(&mut rng);
            (0..n)
                .map(|i| {
                    let mut mine = Vec::with_capacity(gamma * shard_size);
                    for &s in &shard_ids[i * gamma..(i + 1) * gamma] {
                        mine.extend_from_slice(&order[s * shard_size..(s + 1) * shard_size]);
                    }
                    mine
                })
                .collect()
        }
    };

    let label_histograms = assignments
        .iter()
        .map(|list| {
            let mut hist = vec![0usize; q];
            for &i in list {
                hist[dataset.labels[i]] += 1;
            }
            hist
        })
        .collect();

    Ok(PartitionPlan {
        config: *config,
        assignments,
        label_histograms,
        repair_counts,
        dataset_len: m,
    })
}

/// Summary statistics of a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub client_sizes: Vec<usize>,
    /// Total assigned count per class, summed over clients.
    pub class_counts: Vec<usize>,
    pub disjoint: bool,
    /// Mean over clients of the total-variation distance between the client's
    /// label distribution and the global assigned distribution.
    pub heterogeneity: f64,
}

pub fn partition_stats(plan: &PartitionPlan) -> PartitionStats {
    let q = plan.label_histograms.first().map_or(0, |h| h.len());
    let client_sizes: Vec<usize> = plan.assignments.iter().map(|a| a.len()).collect();
    let mut class_counts = vec![0usize; q];
    for hist in &plan.label_histograms {
        for (c, &k) in hist.iter().enumerate() {
            class_counts[c] += k;
        }
    }
    let mut seen = HashSet::new();
    let disjoint = plan
        .assignments
        .iter()
        .flat_map(|a| a.iter())
        .all(|&i| seen.insert(i));

    let total: usize = class_counts.iter().sum();
    let heterogeneity = if total == 0 {
        0.0
    } else {
        let global: Vec<f64> = class_counts.iter().map(|&k| k as f64 / total as f64).collect();
        let tvs: Vec<f64> = plan
            .label_histograms
            .iter()
            .zip(&client_sizes)
            .filter(|(_, &size)| size > 0)
            .map(|(hist, &size)| {
                0.5 * hist
                    .iter()
                    .zip(&global)
                    .map(|(&k, &g)| (k as f64 / size as f64 - g).abs())
                    .sum::<f64>()
            })
            .collect();
        tvs.iter().sum::<f64>() / tvs.len().max(1) as f64
    };

    PartitionStats { client_sizes, class_counts, disjoint, heterogeneity }
}
