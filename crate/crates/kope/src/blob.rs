//! Synthetic blob images: a single-channel grid holding a few axis-aligned
//! shapes of two kinds, labeled by the kind in the majority.

use kope_core::metrics::EntityPartition;
use kope_core::{KopeError, KopeRng, Result, Tensor};
use serde::{Deserialize, Serialize};

const PLACEMENT_TRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobConfig {
    /// Side of the square image in pixels.
    pub size: usize,
    /// Side of a square patch; the token grid is `size / patch` per side.
    pub patch: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Size of a fixed training pool. When absent every training batch is
    /// freshly drawn.
    pub train_samples: Option<usize>,
    pub val_samples: usize,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            size: 16,
            patch: 2,
            min_shapes: 2,
            max_shapes: 4,
            noise: 0.05,
            train_samples: None,
            val_samples: 256,
        }
    }
}

impl BlobConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.size / self.patch, self.size / self.patch)
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.size == 0 || self.size % self.patch != 0 {
            return Err(KopeError::Configuration(format!(
                "image size {} must be a positive multiple of patch {}",
                self.size, self.patch
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(KopeError::Configuration("need 1 <= min_shapes <= max_shapes".into()));
        }
        if self.size < 6 {
            return Err(KopeError::Configuration("image too small for the shapes".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(KopeError::Configuration("noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Shape kinds; the label is the index of the majority kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    /// Filled 2x2 square.
    Square,
    /// 1x4 bar, horizontal or vertical.
    Bar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSample {
    /// `[size, size]` pixels.
    pub image: Tensor,
    /// `[grid cells, patch * patch]` token features in row-major patch order.
    pub tokens: Tensor,
    pub label: usize,
    /// Shape id per pixel, `None` for background.
    pub owner: Vec<Option<usize>>,
    pub kinds: Vec<ShapeKind>,
}

impl BlobSample {
    /// Entity per patch: the shape owning most of its pixels, or a shared
    /// background entity when none does.
    pub fn partition(&self, cfg: &BlobConfig) -> EntityPartition {
        let (gh, gw) = cfg.grid();
        let background = self.kinds.len();
        let mut entity_of = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut counts = vec![0usize; background + 1];
                for dy in 0..cfg.patch {
                    for dx in 0..cfg.patch {
                        let idx = (gy * cfg.patch + dy) * cfg.size + gx * cfg.patch + dx;
                        counts[self.owner[idx].unwrap_or(background)] += 1;
                    }
                }
                let best = (0..background)
                    .filter(|&s| counts[s] > 0)
                    .max_by_key(|&s| (counts[s], std::cmp::Reverse(s)))
                    .unwrap_or(background);
                entity_of.push(best);
            }
        }
        EntityPartition::new(entity_of)
    }
}

fn footprint(kind: ShapeKind, vertical: bool) -> (usize, usize) {
    match kind {
        ShapeKind::Square => (2, 2),
        ShapeKind::Bar if vertical => (4, 1),
        ShapeKind::Bar => (1, 4),
    }
}

/// Draws one image. Shape kinds are assigned so that one kind holds a strict
/// majority; shapes keep a one-pixel gap from each other. Both kinds cover
/// four pixels, so total brightness carries no label information.
pub fn gen_sample(cfg: &BlobConfig, rng: &mut KopeRng) -> Result<BlobSample> {
    let n = cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1);
    let label = rng.below(2);
    let minority = rng.below(n.div_ceil(2));
    let mut kinds: Vec<ShapeKind> = (0..n)
        .map(|i| {
            let majority = i >= minority;
            match (label, majority) {
                (0, true) | (1, false) => ShapeKind::Square,
                _ => ShapeKind::Bar,
            }
        })
        .collect();
    rng.shuffle(&mut kinds);

    let s = cfg.size;
    let mut owner: Vec<Option<usize>> = vec![None; s * s];
    for (id, &kind) in kinds.iter().enumerate() {
        let (h, w) = footprint(kind, rng.coin());
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let y = rng.below(s - h + 1);
            let x = rng.below(s - w + 1);
            let free = (y.saturating_sub(1)..(y + h + 1).min(s))
                .all(|yy| (x.saturating_sub(1)..(x + w + 1).min(s)).all(|xx| owner[yy * s + xx].is_none()));
            if free {
                for yy in y..y + h {
                    for xx in x..x + w {
                        owner[yy * s + xx] = Some(id);
                    }
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(KopeError::Generation(format!("could not place {n} shapes on a {s}x{s} grid")));
        }
    }

    let pixels: Vec<f64> = owner
        .iter()
        .map(|o| f64::from(u8::from(o.is_some())) + cfg.noise * rng.normal())
        .collect();
    let (gh, gw) = cfg.grid();
    let p = cfg.patch;
    let mut tokens = Vec::with_capacity(gh * gw * p * p);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    tokens.push(pixels[(gy * p + dy) * s + gx * p + dx]);
                }
            }
        }
    }
    Ok(BlobSample {
        image: Tensor::new(vec![s, s], pixels)?,
        tokens: Tensor::new(vec![gh * gw, p * p], tokens)?,
        label,
        owner,
        kinds,
    })
}

#[derive(Clone, Debug)]
pub struct BlobData {
    pub train: Vec<BlobSample>,
    pub val: Vec<BlobSample>,
}

/// Validation split, plus the fixed training pool when one is configured,
/// drawn from independent streams of `seed`.
pub fn gen_blob_data(cfg: &BlobConfig, seed: u64) -> Result<BlobData> {
    cfg.validate()?;
    let root = KopeRng::new(seed);
    let mut tr = root.split(10);
    let mut va = root.split(11);
    Ok(BlobData {
        train: (0..cfg.train_samples.unwrap_or(0))
            .map(|_| gen_sample(cfg, &mut tr))
            .collect::<Result<_>>()?,
        val: (0..cfg.val_samples).map(|_| gen_sample(cfg, &mut va)).collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_the_majority_kind() {
        let cfg = BlobConfig::default();
        let mut rng = KopeRng::new(1);
        for _ in 0..200 {
            let s = gen_sample(&cfg, &mut rng).unwrap();
            let squares = s.kinds.iter().filter(|k| **k == ShapeKind::Square).count();
            let bars = s.kinds.len() - squares;
            assert!((2..=4).contains(&s.kinds.len()));
            assert_eq!(s.label, usize::from(bars > squares));
            assert_ne!(squares, bars);
        }
    }

    #[test]
    fn patches_reassemble_the_image() {
        let cfg = BlobConfig::default();
        let s = gen_sample(&cfg, &mut KopeRng::new(2)).unwrap();
        assert_eq!(s.tokens.shape(), &[64, 4]);
        // Patch (1, 2) holds pixels rows 2..4, cols 4..6.
        let tok = s.tokens.row(8 + 2);
        assert_eq!(tok, &[s.image.at(2, 4), s.image.at(2, 5), s.image.at(3, 4), s.image.at(3, 5)]);
        let p = s.partition(&cfg);
        assert_eq!(p.tokens(), 64);
    }
}
