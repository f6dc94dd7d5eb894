//! Attention concentration and phase synchronization measurements.

use std::collections::BTreeMap;

use crate::error::{KopeError, Result};
use crate::kuramoto::PhaseState;
use crate::tensor::Tensor;

const ROW_SUM_TOL: f64 = 1e-9;

/// One attention distribution, usually the CLS row of a head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRow {
    weights: Vec<f64>,
}

impl AttentionRow {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(KopeError::Parameter("attention row is empty".into()));
        }
        let s: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(KopeError::Parameter(format!(
                "attention row must be a distribution (sum {s})"
            )));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `sum_i (2i - N - 1) a_i / sum_i a_i` over the ascending sort, `i` from 1.
/// Ranges over `[0, N - 1]`. Accepts any nonnegative weights with positive
/// total, so rescaling the row leaves the value unchanged.
pub fn gini(weights: &[f64]) -> Result<f64> {
    let n = weights.len();
    if n == 0 {
        return Err(KopeError::Parameter("gini of an empty row".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(KopeError::Parameter("gini needs finite nonnegative weights".into()));
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        return Err(KopeError::Parameter("gini needs a positive total weight".into()));
    }
    // Coefficients are antisymmetric about the middle, so pair each upper
    // entry with its mirror: every term is then a nonnegative difference.
    let num: f64 = (n / 2..n)
        .map(|i| ((2 * (i + 1)) as f64 - n as f64 - 1.0) * (sorted[i] - sorted[n - 1 - i]))
        .sum();
    Ok(num / total)
}

/// [`gini`] divided by `N - 1`, in `[0, 1]`; 0 for a single-entry row.
pub fn gini_normalized(weights: &[f64]) -> Result<f64> {
    let g = gini(weights)?;
    Ok(if weights.len() > 1 {
        g / (weights.len() - 1) as f64
    } else {
        0.0
    })
}

/// Gini of the CLS row (row 0) and the mean Gini over every query row of
/// an attention matrix.
pub fn gini_reductions(attention: &Tensor) -> Result<(f64, f64)> {
    let (rows, _) = attention.dims2()?;
    if rows == 0 {
        return Err(KopeError::Parameter("attention matrix has no rows".into()));
    }
    let cls = gini(attention.row(0))?;
    let mut all = 0.0;
    for r in 0..rows {
        all += gini(attention.row(r))?;
    }
    Ok((cls, all / rows as f64))
}

/// `|sum_j a_j e^{i phi_j}|` for scalar angles.
pub fn sync_att(phases: &[f64], row: &AttentionRow) -> Result<f64> {
    if phases.len() != row.len() {
        return Err(KopeError::Dimension {
            op: "sync_att",
            detail: format!("{} phases vs {} weights", phases.len(), row.len()),
        });
    }
    let (c, s) = phases
        .iter()
        .zip(row.weights())
        .fold((0.0, 0.0), |(c, s), (p, w)| (c + w * p.cos(), s + w * p.sin()));
    Ok(c.hypot(s))
}

/// [`sync_att`] over a full phase state, averaged over heads and subspaces.
/// `rows[h]` is the attention row used for head `h`.
pub fn sync_att_state(state: &PhaseState, rows: &[AttentionRow]) -> Result<f64> {
    if rows.len() != state.heads() {
        return Err(KopeError::Dimension {
            op: "sync_att_state",
            detail: format!("{} rows for {} heads", rows.len(), state.heads()),
        });
    }
    let mut acc = 0.0;
    for (h, row) in rows.iter().enumerate() {
        if row.len() != state.tokens() {
            return Err(KopeError::Dimension {
                op: "sync_att_state",
                detail: "row length differs from token count".into(),
            });
        }
        for p in 0..state.pairs() {
            let (mut c, mut s) = (0.0, 0.0);
            for (t, w) in row.weights().iter().enumerate() {
                let (ct, st) = state.pair(t, h, p);
                c += w * ct;
                s += w * st;
            }
            acc += c.hypot(s);
        }
    }
    Ok(acc / (state.heads() * state.pairs()) as f64)
}

/// Assignment of non-CLS tokens to entities. Token `t` of the phase state
/// maps to `entity_of[t - 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityPartition {
    entity_of: Vec<usize>,
    sets: BTreeMap<usize, Vec<usize>>,
}

impl EntityPartition {
    pub fn new(entity_of: Vec<usize>) -> Self {
        let mut sets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in entity_of.iter().enumerate() {
            sets.entry(*e).or_default().push(i + 1);
        }
        Self { entity_of, sets }
    }

    /// Partition with explicit token sets (token indices include the CLS
    /// offset). Every non-CLS token `1..=n` must appear exactly once.
    pub fn from_sets(n: usize, sets: &[Vec<usize>]) -> Result<Self> {
        let mut entity_of = vec![usize::MAX; n];
        for (e, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(KopeError::Parameter(format!("entity {e} is empty")));
            }
            for &t in set {
                if t == 0 || t > n || entity_of[t - 1] != usize::MAX {
                    return Err(KopeError::Parameter(format!(
                        "token {t} is out of range or assigned twice"
                    )));
                }
                entity_of[t - 1] = e;
            }
        }
        if entity_of.contains(&usize::MAX) {
            return Err(KopeError::Parameter("partition does not cover every token".into()));
        }
        Ok(Self::new(entity_of))
    }

    pub fn tokens(&self) -> usize {
        self.entity_of.len()
    }

    pub fn entity_of(&self) -> &[usize] {
        &self.entity_of
    }

    pub fn entities(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.sets.iter().map(|(e, s)| (*e, s.as_slice()))
    }
}

/// Per-entity uniform order parameter averaged over heads and subspaces,
/// then averaged over entities.
pub fn entity_sync(state: &PhaseState, partition: &EntityPartition) -> Result<f64> {
    if partition.tokens() + 1 != state.tokens() {
        return Err(KopeError::Dimension {
            op: "entity_sync",
            detail: format!(
                "partition covers {} tokens, state has {} plus CLS",
                partition.tokens(),
                state.tokens().saturating_sub(1)
            ),
        });
    }
    let mut total = 0.0;
    let mut count = 0;
    for (e, set) in partition.entities() {
        if set.is_empty() {
            return Err(KopeError::Parameter(format!("entity {e} is empty")));
        }
        let mut acc = 0.0;
        for h in 0..state.heads() {
            for p in 0..state.pairs() {
                let (mut c, mut s) = (0.0, 0.0);
                for &t in set {
                    let (ct, st) = state.pair(t, h, p);
                    c += ct;
                    s += st;
                }
                acc += c.hypot(s) / set.len() as f64;
            }
        }
        total += acc / (state.heads() * state.pairs()) as f64;
        count += 1;
    }
    if count == 0 {
        return Err(KopeError::Parameter("partition has no entities".into()));
    }
    Ok(total / count as f64)
}

/// Visualization weighting `a_i |cos(phi_0 - phi_i)|`, not renormalized.
pub fn gated_attention_map(row: &AttentionRow, phases: &[f64], cls_phase: f64) -> Result<Vec<f64>> {
    if phases.len() != row.len() {
        return Err(KopeError::Dimension {
            op: "gated_attention_map",
            detail: format!("{} phases vs {} weights", phases.len(), row.len()),
        });
    }
    Ok(row
        .weights()
        .iter()
        .zip(phases)
        .map(|(a, p)| a * (cls_phase - p).cos().abs())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[0.25; 4]).unwrap(), 0.0);
        let mut hot = vec![0.0; 10];
        hot[3] = 1.0;
        assert_eq!(gini(&hot).unwrap(), 9.0);
        assert_eq!(gini(&[0.4, 0.1, 0.3, 0.2]).unwrap(), 1.0);
        assert!(gini(&[]).is_err());
        assert!((gini_normalized(&hot).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sync_examples() {
        let row = AttentionRow::new(vec![0.25, 0.75]).unwrap();
        let v = sync_att(&[0.0, FRAC_PI_2], &row).unwrap();
        assert!((v - (0.25f64.powi(2) + 0.75f64.powi(2)).sqrt()).abs() < 1e-12);
        let u = AttentionRow::uniform(2).unwrap();
        assert!(sync_att(&[0.0, PI], &u).unwrap() < 1e-12);
        assert!((sync_att(&[1.3, 1.3], &u).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entity_examples() {
        let s = PhaseState::from_angles(3, 1, 1, &[0.0, 0.0, FRAC_PI_2]).unwrap();
        let one = EntityPartition::new(vec![0, 0]);
        assert!((entity_sync(&s, &one).unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-12);
        let singles = EntityPartition::new(vec![0, 1]);
        assert!((entity_sync(&s, &singles).unwrap() - 1.0).abs() < 1e-12);
        assert!(EntityPartition::from_sets(2, &[vec![1], vec![]]).is_err());
        assert!(EntityPartition::from_sets(3, &[vec![1, 2]]).is_err());
    }

    #[test]
    fn gated_examples() {
        let row = AttentionRow::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(gated_attention_map(&row, &[0.4; 3], 0.4).unwrap(), row.weights().to_vec());
        let g = gated_attention_map(&row, &[0.0, FRAC_PI_2, 2.0], 0.0).unwrap();
        assert!(g[1].abs() < 1e-16);
        assert!((g[2] - 0.2 * 2f64.cos().abs()).abs() < 1e-16);
    }
}
