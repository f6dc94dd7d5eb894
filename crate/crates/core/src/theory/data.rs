use std::f64::consts::PI;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{KopeError, Result};
use crate::rng::KopeRng;
use crate::tensor::Tensor;

use super::{ClusterSpec, TheoryDataConfig};

const PATTERN_TRIES: usize = 100_000;
const RESAMPLE_TRIES: usize = 10_000;

/// Cluster id of the label-relevant cluster in [`TheoryInstance::cluster`].
pub(crate) const RELEVANT_CLUSTER: usize = 0;

/// One sample. Token 0 is CLS; index sets refer to tokens `1..=L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryInstance {
    pub tokens: Vec<Vec<f64>>,
    /// `+1` or `-1`.
    pub label: i8,
    pub s_star: Vec<usize>,
    pub s_confusion: Vec<usize>,
    pub s_irrelevant: Vec<usize>,
    /// Radians, one per token including CLS.
    pub phases: Vec<f64>,
    /// `0` for the label-relevant cluster, `1` otherwise.
    pub cluster: Vec<usize>,
    pub cluster_center: f64,
}

impl TheoryInstance {
    /// Number of non-CLS tokens.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens `1..=L` that are not label-relevant.
    pub fn s_other(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.s_confusion.iter().chain(&self.s_irrelevant).copied().collect();
        v.sort_unstable();
        v
    }

    /// Label-relevant tokens inside the relevant cluster.
    pub fn s_star_hat(&self) -> Vec<usize> {
        self.s_star
            .iter()
            .copied()
            .filter(|&j| self.cluster[j] == RELEVANT_CLUSTER)
            .collect()
    }

    /// `[L + 1, d]` token matrix.
    pub fn token_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.tokens).expect("rectangular tokens")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryDataset {
    pub config: TheoryDataConfig,
    pub patterns: Vec<Vec<f64>>,
    pub instances: Vec<TheoryInstance>,
}

fn unit_vector(dim: usize, rng: &mut KopeRng) -> Vec<f64> {
    loop {
        let v = rng.normal_vec(dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn gen_patterns(cfg: &TheoryDataConfig, rng: &mut KopeRng) -> Result<Vec<Vec<f64>>> {
    let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(cfg.patterns);
    let mut tries = 0;
    while patterns.len() < cfg.patterns {
        tries += 1;
        if tries > PATTERN_TRIES {
            return Err(KopeError::Generation(format!(
                "could not place {} unit patterns in dimension {} at distance {}",
                cfg.patterns, cfg.dim, cfg.kappa
            )));
        }
        let p = unit_vector(cfg.dim, rng);
        if patterns.iter().all(|q| distance(q, &p) >= cfg.kappa) {
            patterns.push(p);
        }
    }
    Ok(patterns)
}

/// A unit vector within `tau` of `pattern`: uniform in the ball, projected
/// back to the sphere, rejected if the projection left the ball.
fn noisy_copy(pattern: &[f64], tau: f64, rng: &mut KopeRng) -> Result<Vec<f64>> {
    if tau == 0.0 {
        return Ok(pattern.to_vec());
    }
    let d = pattern.len();
    for _ in 0..RESAMPLE_TRIES {
        let dir = unit_vector(d, rng);
        let radius = tau * rng.uniform().powf(1.0 / d as f64);
        let raw: Vec<f64> = pattern.iter().zip(&dir).map(|(p, u)| p + radius * u).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let tok: Vec<f64> = raw.into_iter().map(|x| x / n).collect();
        if distance(&tok, pattern) <= tau {
            return Ok(tok);
        }
    }
    Err(KopeError::Generation("noise sampling kept leaving the tau-ball".into()))
}

fn stochastic_round(x: f64, rng: &mut KopeRng) -> usize {
    let f = x.floor();
    f as usize + usize::from(rng.uniform() < x - f)
}

/// Largest count strictly below `xi * n` (zero when `xi * n <= 0`).
pub(crate) fn misassigned_count(xi: f64, n: usize) -> usize {
    let x = xi * n as f64;
    if x <= 0.0 {
        0
    } else {
        x.ceil() as usize - 1
    }
}

fn wrap(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Phases for `n + 1` tokens: CLS and `in_cluster` within `epsilon / 2` of a
/// random center, everything else between `delta_min + epsilon / 2` and `pi`
/// away from it on a random side. Returns `(phases, cluster, center)`.
pub(crate) fn place_phases(
    spec: &ClusterSpec,
    n: usize,
    in_cluster: &[usize],
    rng: &mut KopeRng,
) -> (Vec<f64>, Vec<usize>, f64) {
    let center = rng.uniform_range(-PI, PI);
    let mut cluster = vec![1; n + 1];
    cluster[0] = RELEVANT_CLUSTER;
    for &j in in_cluster {
        cluster[j] = RELEVANT_CLUSTER;
    }
    let half = spec.epsilon / 2.0;
    let phases = cluster
        .iter()
        .map(|&c| {
            if c == RELEVANT_CLUSTER {
                wrap(center + rng.uniform_range(-half, half))
            } else {
                let off = rng.uniform_range(spec.delta_min + half, PI);
                wrap(if rng.coin() { center + off } else { center - off })
            }
        })
        .collect();
    (phases, cluster, center)
}

fn gen_instance(
    cfg: &TheoryDataConfig,
    patterns: &[Vec<f64>],
    label: i8,
    rng: &mut KopeRng,
) -> Result<TheoryInstance> {
    let l = cfg.tokens;
    let mut counts = None;
    for _ in 0..RESAMPLE_TRIES {
        let ns = stochastic_round(cfg.alpha_star * l as f64, rng).clamp(1, l);
        let nc = stochastic_round(cfg.alpha_sharp * l as f64, rng).min(l - ns);
        // Ties and confusion majorities are resampled.
        if ns > nc {
            counts = Some((ns, nc));
            break;
        }
    }
    let (ns, nc) = counts.ok_or_else(|| KopeError::Generation("no majority composition found".into()))?;
    let mut slots: Vec<usize> = (1..=l).collect();
    rng.shuffle(&mut slots);
    let mut s_star = slots[..ns].to_vec();
    let mut s_confusion = slots[ns..ns + nc].to_vec();
    let mut s_irrelevant = slots[ns + nc..].to_vec();
    s_star.sort_unstable();
    s_confusion.sort_unstable();
    s_irrelevant.sort_unstable();

    let (relevant, confusing) = if label > 0 { (0, 1) } else { (1, 0) };
    let mut tokens = vec![Vec::new(); l + 1];
    for &j in &s_star {
        tokens[j] = noisy_copy(&patterns[relevant], cfg.tau, rng)?;
    }
    for &j in &s_confusion {
        tokens[j] = noisy_copy(&patterns[confusing], cfg.tau, rng)?;
    }
    for &j in &s_irrelevant {
        let p = 2 + rng.below(cfg.patterns - 2);
        tokens[j] = noisy_copy(&patterns[p], cfg.tau, rng)?;
    }
    // CLS content: the normalized token mean.
    let mut cls = vec![0.0; cfg.dim];
    for t in &tokens[1..] {
        for (c, v) in cls.iter_mut().zip(t) {
            *c += v;
        }
    }
    let n = cls.iter().map(|x| x * x).sum::<f64>().sqrt();
    tokens[0] = if n > 1e-12 {
        cls.into_iter().map(|x| x / n).collect()
    } else {
        patterns[relevant].clone()
    };

    let mut hat = s_star.clone();
    rng.shuffle(&mut hat);
    hat.truncate(ns - misassigned_count(cfg.cluster.xi, ns));
    let (phases, cluster, center) = place_phases(&cfg.cluster, l, &hat, rng);
    Ok(TheoryInstance {
        tokens,
        label,
        s_star,
        s_confusion,
        s_irrelevant,
        phases,
        cluster,
        cluster_center: center,
    })
}

/// Draws the patterns and `samples` instances with alternating labels.
pub fn gen_dataset(config: &TheoryDataConfig, seed: u64) -> Result<TheoryDataset> {
    config.validate()?;
    config.cluster.validate_geometry()?;
    let mut rng = KopeRng::new(seed);
    let patterns = gen_patterns(config, &mut rng)?;
    let instances = (0..config.samples)
        .map(|i| {
            let label = if i % 2 == 0 { 1 } else { -1 };
            gen_instance(config, &patterns, label, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TheoryDataset {
        config: *config,
        patterns,
        instances,
    })
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(mut w: W, instances: &[TheoryInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TheoryInstance>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn misassignment_is_strictly_below_the_fraction() {
        assert_eq!(misassigned_count(0.0, 10), 0);
        assert_eq!(misassigned_count(0.1, 10), 0);
        assert_eq!(misassigned_count(0.1, 11), 1);
        assert_eq!(misassigned_count(0.25, 3), 0);
        assert_eq!(misassigned_count(0.5, 5), 2);
    }

    #[test]
    fn wrap_stays_in_range() {
        for a in [-7.0, -PI, 0.0, PI, 4.0, 100.0] {
            let w = wrap(a);
            assert!(w > -PI && w <= PI);
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }
}
