//! Planted-noise synthetic interactions: clustered preferences plus labeled
//! cross-cluster noise edges.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Mean probability of each same-cluster user-item pair.
    pub intra_p: f64,
    /// Share of all edges that are planted noise.
    pub noise_fraction: f64,
    /// Zipf exponent of item popularity inside a cluster (0 = uniform).
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 500,
            items: 400,
            clusters: 5,
            intra_p: 0.05,
            noise_fraction: 0.2,
            popularity_skew: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDataset {
    /// `(user, item)` sorted, duplicate-free.
    pub pairs: Vec<(u32, u32)>,
    /// Aligned with `pairs`.
    pub noise: Vec<bool>,
    pub user_cluster: Vec<u32>,
    pub item_cluster: Vec<u32>,
}

impl PlantedDataset {
    pub fn num_noise(&self) -> usize {
        self.noise.iter().filter(|n| **n).count()
    }

    pub fn interactions_tsv(&self) -> String {
        let mut s = String::from("# user\titem\n");
        for &(u, v) in &self.pairs {
            writeln!(s, "{u}\t{v}").unwrap();
        }
        s
    }

    pub fn labels_tsv(&self) -> String {
        let mut s = String::from("# user\titem\tlabel\n");
        for (&(u, v), &n) in self.pairs.iter().zip(&self.noise) {
            writeln!(s, "{u}\t{v}\t{}", if n { "noise" } else { "clean" }).unwrap();
        }
        s
    }

    /// Writes `interactions.tsv` and the `noise_labels.tsv` sidecar into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("interactions.tsv"), self.interactions_tsv().as_bytes())?;
        write_atomic(&dir.join("noise_labels.tsv"), self.labels_tsv().as_bytes())
    }
}

/// Generates the planted dataset. Noise edges join users and items of different
/// clusters; their count is `round(clean * f / (1 - f))`.
pub fn synth_planted(cfg: &SynthConfig) -> Result<PlantedDataset> {
    if cfg.clusters < 2 {
        return Err(Error::InvalidArgument("synth needs at least 2 clusters".into()));
    }
    if !(0.0..0.5).contains(&cfg.noise_fraction) {
        return Err(Error::InvalidArgument(format!("noise fraction {} not in [0, 0.5)", cfg.noise_fraction)));
    }
    if !(cfg.intra_p > 0.0 && cfg.intra_p <= 1.0) {
        return Err(Error::InvalidArgument(format!("intra_p {} not in (0, 1]", cfg.intra_p)));
    }
    if cfg.users < cfg.clusters || cfg.items < cfg.clusters {
        return Err(Error::InvalidArgument("need at least one user and one item per cluster".into()));
    }
    let mut r = rng::stream(cfg.seed, rng::SYNTH);
    let k = cfg.clusters;
    let user_cluster: Vec<u32> = (0..cfg.users).map(|u| (u % k) as u32).collect();
    let item_cluster: Vec<u32> = (0..cfg.items).map(|v| (v % k) as u32).collect();
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); k];
    for (v, &c) in item_cluster.iter().enumerate() {
        members[c as usize].push(v as u32);
    }
    // per-item probability: Zipf weight by rank inside its cluster, normalized to mean intra_p
    let mut prob = vec![0.0; cfg.items];
    for list in &members {
        let w: Vec<f64> = (0..list.len()).map(|rank| ((rank + 1) as f64).powf(-cfg.popularity_skew)).collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        for (&v, wv) in list.iter().zip(&w) {
            prob[v as usize] = (cfg.intra_p * wv / mean).min(1.0);
        }
    }

    let mut clean: Vec<(u32, u32)> = Vec::new();
    for u in 0..cfg.users {
        let list = &members[user_cluster[u] as usize];
        loop {
            let picked: Vec<u32> = list.iter().copied().filter(|&v| r.random_bool(prob[v as usize])).collect();
            if !picked.is_empty() {
                clean.extend(picked.into_iter().map(|v| (u as u32, v)));
                break;
            }
        }
    }

    let f = cfg.noise_fraction;
    let num_noise = (clean.len() as f64 * f / (1.0 - f)).round() as usize;
    let capacity: usize = (0..cfg.users).map(|u| cfg.items - members[user_cluster[u] as usize].len()).sum();
    if num_noise > capacity {
        return Err(Error::InvalidArgument("not enough cross-cluster pairs for the requested noise".into()));
    }
    let mut noise: HashSet<(u32, u32)> = HashSet::with_capacity(num_noise);
    let mut noise_order = Vec::with_capacity(num_noise);
    while noise_order.len() < num_noise {
        let u = r.random_range(0..cfg.users as u32);
        let v = r.random_range(0..cfg.items as u32);
        if user_cluster[u as usize] != item_cluster[v as usize] && noise.insert((u, v)) {
            noise_order.push((u, v));
        }
    }

    let mut all: Vec<((u32, u32), bool)> = clean.into_iter().map(|p| (p, false)).collect();
    all.extend(noise_order.into_iter().map(|p| (p, true)));
    all.sort_unstable();
    Ok(PlantedDataset {
        pairs: all.iter().map(|x| x.0).collect(),
        noise: all.iter().map(|x| x.1).collect(),
        user_cluster,
        item_cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_noise_means_intra_cluster_only() {
        let d = synth_planted(&SynthConfig {
            noise_fraction: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(d.num_noise(), 0);
        assert!(d.pairs.iter().all(|&(u, v)| d.user_cluster[u as usize] == d.item_cluster[v as usize]));
    }

    #[test]
    fn exact_noise_count_and_labels() {
        let d = synth_planted(&SynthConfig::default()).unwrap();
        let clean = d.pairs.len() - d.num_noise();
        assert_eq!(d.num_noise(), (clean as f64 * 0.25).round() as usize);
        assert_eq!(d.labels_tsv().lines().count() - 1, d.pairs.len());
        for (&(u, v), &n) in d.pairs.iter().zip(&d.noise) {
            assert_eq!(n, d.user_cluster[u as usize] != d.item_cluster[v as usize]);
        }
        let mut seen = d.pairs.clone();
        seen.dedup();
        assert_eq!(seen.len(), d.pairs.len());
    }

    #[test]
    fn every_user_has_an_edge() {
        let d = synth_planted(&SynthConfig {
            intra_p: 0.01,
            ..Default::default()
        })
        .unwrap();
        let mut has = vec![false; 500];
        for &(u, _) in &d.pairs {
            has[u as usize] = true;
        }
        assert!(has.iter().all(|h| *h));
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_planted(&SynthConfig::default()).unwrap(), synth_planted(&SynthConfig::default()).unwrap());
    }
}
