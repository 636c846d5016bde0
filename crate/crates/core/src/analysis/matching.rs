//! Longitudinal lesion correspondence between two labeled time points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::components::LesionSet;
use crate::error::{Error, Result};
use crate::transform::{warp_mask, DisplacementField};
use crate::volume::LabelMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Matched,
    Split,
    Merge,
    Disappeared,
    New,
}

impl MatchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchKind::Matched => "matched",
            MatchKind::Split => "split",
            MatchKind::Merge => "merge",
            MatchKind::Disappeared => "disappeared",
            MatchKind::New => "new",
        }
    }
}

/// Dice overlap between one baseline lesion and one warped follow-up lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDice {
    pub baseline_id: u32,
    pub followup_id: u32,
    pub dice: f64,
}

/// One connected group of corresponding lesions. Every lesion id of both time
/// points appears in exactly one match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMatch {
    pub baseline_ids: Vec<u32>,
    pub followup_ids: Vec<u32>,
    pub kind: MatchKind,
    /// Overlap pairs that cleared the threshold, strongest evidence first.
    pub overlap_dice: Vec<PairDice>,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet { parent: (0..n).collect() }
    }
    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[rb] = ra;
        }
    }
}

/// Match baseline lesions to follow-up lesions.
///
/// The follow-up mask is warped into baseline space with nearest-neighbour
/// interpolation through `field` (the field whose warp pulls follow-up
/// content into baseline alignment), lesion pairs with Dice >= `min_dice`
/// become edges, and each connected group of the resulting bipartite graph is
/// reported as one match. Group shape decides the kind: one-to-one pairs are
/// `matched`, one baseline against several follow-ups is a `split`, several
/// baselines against one follow-up is a `merge`, and lesions with no
/// counterpart are `disappeared` (baseline only) or `new` (follow-up only).
/// Many-to-many groups take the direction of the larger side, splits winning
/// ties.
pub fn match_lesions(
    base: &LesionSet,
    follow: &LesionSet,
    field: &DisplacementField,
    min_dice: f64,
) -> Result<Vec<LesionMatch>> {
    if !(0.0..=1.0).contains(&min_dice) {
        return Err(Error::Config(format!(
            "min_dice must be within [0, 1], got {min_dice}"
        )));
    }
    if base.mask.grid != field.grid {
        return Err(Error::GridMismatch(format!(
            "baseline mask grid {:?} does not match field grid {:?}",
            base.mask.grid.dims, field.grid.dims
        )));
    }
    if follow.mask.grid != field.grid {
        return Err(Error::GridMismatch(format!(
            "follow-up mask grid {:?} does not match field grid {:?}",
            follow.mask.grid.dims, field.grid.dims
        )));
    }
    let warped: LabelMask = warp_mask(&follow.mask, field)?;

    let base_ids = base.ids();
    let follow_ids = follow.ids();
    let nb = base_ids.len();
    let nf = follow_ids.len();

    // voxel counts per label and per overlapping pair, one pass
    let mut pair_inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&lb, &lf) in base.mask.labels.iter().zip(&warped.labels) {
        if lb != 0 && lf != 0 {
            *pair_inter.entry((lb, lf)).or_insert(0) += 1;
        }
    }
    let mut base_count: BTreeMap<u32, usize> = base_ids.iter().map(|&id| (id, 0)).collect();
    let mut warped_count: BTreeMap<u32, usize> = follow_ids.iter().map(|&id| (id, 0)).collect();
    for &l in &base.mask.labels {
        if l != 0 {
            *base_count.entry(l).or_insert(0) += 1;
        }
    }
    for &l in &warped.labels {
        if l != 0 {
            *warped_count.entry(l).or_insert(0) += 1;
        }
    }

    // graph nodes: 0..nb baseline, nb..nb+nf follow-up
    let b_node: BTreeMap<u32, usize> = base_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let f_node: BTreeMap<u32, usize> =
        follow_ids.iter().enumerate().map(|(i, &id)| (id, nb + i)).collect();
    let mut dsu = DisjointSet::new(nb + nf);
    let mut edges: Vec<PairDice> = Vec::new();
    for (&(lb, lf), &inter) in &pair_inter {
        let denom = base_count[&lb] + warped_count[&lf];
        let d = 2.0 * inter as f64 / denom as f64;
        if d >= min_dice {
            edges.push(PairDice { baseline_id: lb, followup_id: lf, dice: d });
            dsu.union(b_node[&lb], f_node[&lf]);
        }
    }

    // group nodes by representative
    let mut groups: BTreeMap<usize, (Vec<u32>, Vec<u32>)> = BTreeMap::new();
    for &id in &base_ids {
        let root = dsu.find(b_node[&id]);
        groups.entry(root).or_default().0.push(id);
    }
    for &id in &follow_ids {
        let root = dsu.find(f_node[&id]);
        groups.entry(root).or_default().1.push(id);
    }

    let mut matches: Vec<LesionMatch> = groups
        .into_values()
        .map(|(b, f)| {
            let kind = match (b.len(), f.len()) {
                (1, 1) => MatchKind::Matched,
                (_, 0) => MatchKind::Disappeared,
                (0, _) => MatchKind::New,
                (1, _) => MatchKind::Split,
                (_, 1) => MatchKind::Merge,
                (m, n) => {
                    if n >= m {
                        MatchKind::Split
                    } else {
                        MatchKind::Merge
                    }
                }
            };
            let mut pairs: Vec<PairDice> = edges
                .iter()
                .filter(|e| b.contains(&e.baseline_id) && f.contains(&e.followup_id))
                .copied()
                .collect();
            pairs.sort_by(|p, q| {
                q.dice
                    .total_cmp(&p.dice)
                    .then(p.baseline_id.cmp(&q.baseline_id))
                    .then(p.followup_id.cmp(&q.followup_id))
            });
            LesionMatch { baseline_ids: b, followup_ids: f, kind, overlap_dice: pairs }
        })
        .collect();
    matches.sort_by_key(|m| {
        (
            m.baseline_ids.first().copied().unwrap_or(u32::MAX),
            m.followup_ids.first().copied().unwrap_or(u32::MAX),
        )
    });
    Ok(matches)
}
