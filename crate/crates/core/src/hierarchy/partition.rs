use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Hierarchy;
use crate::error::{Error, Result};

/// Which sub-hierarchy reconciliation consumes a level's forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Upper,
    Lower,
}

/// Level label → side, plus the levels whose series straddle several lower
/// sub-hierarchies (their constraints cannot be imposed in either step).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForecastAssignment {
    pub sides: BTreeMap<String, Side>,
    pub non_nesting: BTreeSet<String>,
}

impl ForecastAssignment {
    pub fn side(&self, level: &str) -> Option<Side> {
        self.sides.get(level).copied()
    }

    /// Overrides the side for one level. Non-nesting levels may only go lower.
    pub fn assign(&mut self, level: &str, side: Side) -> Result<()> {
        if !self.sides.contains_key(level) {
            return Err(Error::Config(format!("unknown level `{level}` in forecast assignment")));
        }
        if side == Side::Upper && self.non_nesting.contains(level) {
            return Err(Error::Config(format!(
                "level `{level}` does not nest in the upper sub-hierarchy"
            )));
        }
        self.sides.insert(level.to_string(), side);
        Ok(())
    }
}

/// A hierarchy split at a boundary level into one upper sub-hierarchy (the
/// boundary level and everything above it) and one lower sub-hierarchy rooted
/// at each boundary series.
#[derive(Debug, Clone)]
pub struct SubHierarchyPartition {
    pub boundary_level: String,
    pub upper: Hierarchy,
    /// Upper series index → original series index.
    pub upper_map: Vec<usize>,
    pub lowers: Vec<Hierarchy>,
    /// Lower series index → original series index, per lower.
    pub lower_maps: Vec<Vec<usize>>,
    /// Original index of each boundary series; lower `k` is rooted at `boundary[k]`.
    pub boundary: Vec<usize>,
    /// Original base index → (lower, base index within that lower).
    pub base_owner: Vec<(usize, usize)>,
    n_a_orig: usize,
    /// Original series indices that belong to neither step's constraints.
    pub non_nesting_series: Vec<usize>,
    pub forecast_assignment: ForecastAssignment,
}

impl SubHierarchyPartition {
    /// Original base indices of lower `k`, in that lower's base order.
    pub fn lower_base(&self, k: usize) -> Vec<usize> {
        let h = &self.lowers[k];
        self.lower_maps[k][h.n_a()..].iter().map(|&o| o - self.n_a_orig).collect()
    }
}

impl Hierarchy {
    /// Splits the hierarchy at `boundary_level`.
    pub fn partition(&self, boundary_level: &str) -> Result<SubHierarchyPartition> {
        let perr = |reason: String| Error::Partition {
            level: boundary_level.to_string(),
            reason,
        };
        let s = self.summing();
        let n_a = self.n_a();
        let n_b = self.n_b();
        let boundary = self.rows_in_level(boundary_level);
        if boundary.is_empty() {
            return Err(perr("no series carry this level label".into()));
        }

        let mut owner: Vec<Option<usize>> = vec![None; n_b];
        for (k, &b) in boundary.iter().enumerate() {
            for &j in s.row(b) {
                if let Some(prev) = owner[j] {
                    return Err(perr(format!(
                        "base series `{}` has more than one ancestor at this level (`{}`, `{}`)",
                        self.id(n_a + j),
                        self.id(boundary[prev]),
                        self.id(b)
                    )));
                }
                owner[j] = Some(k);
            }
        }
        let owner: Vec<usize> = owner
            .into_iter()
            .enumerate()
            .map(|(j, o)| o.ok_or_else(|| perr(format!("base series `{}` has no ancestor at this level", self.id(n_a + j)))))
            .collect::<Result<_>>()?;

        let is_boundary: Vec<bool> = {
            let mut v = vec![false; self.n()];
            for &b in &boundary {
                v[b] = true;
            }
            v
        };

        // Classify every non-boundary aggregate.
        let mut upper_aggs = Vec::new();
        let mut lower_aggs: Vec<Vec<usize>> = vec![Vec::new(); boundary.len()];
        let mut non_nesting = Vec::new();
        for a in 0..n_a {
            if is_boundary[a] {
                continue;
            }
            let row = s.row(a);
            let owners: BTreeSet<usize> = row.iter().map(|&j| owner[j]).collect();
            let covered: usize = owners.iter().map(|&k| s.row(boundary[k]).len()).sum();
            if covered == row.len() {
                upper_aggs.push(a);
            } else if owners.len() == 1 {
                lower_aggs[*owners.iter().next().unwrap()].push(a);
            } else {
                non_nesting.push(a);
            }
        }

        // Upper sub-hierarchy: non-boundary upper aggregates, then boundary series.
        let upper_map: Vec<usize> = upper_aggs.iter().chain(boundary.iter()).copied().collect();
        let upper = if upper_aggs.is_empty() {
            Hierarchy::singleton(self.id(boundary[0]), self.level(boundary[0]))
        } else {
            let coverage = |u: usize| -> Vec<usize> {
                let row = s.row(u);
                let mut ks: Vec<usize> = row.iter().map(|&j| owner[j]).collect();
                ks.sort_unstable();
                ks.dedup();
                ks
            };
            self.sub_hierarchy(&upper_aggs, &boundary, coverage)?
        };
        if upper_aggs.is_empty() && boundary.len() > 1 {
            return Err(perr("boundary series have no common upper aggregate".into()));
        }

        // Lower sub-hierarchies.
        let mut lowers = Vec::with_capacity(boundary.len());
        let mut lower_maps = Vec::with_capacity(boundary.len());
        let mut base_owner = vec![(0, 0); n_b];
        for (k, &b) in boundary.iter().enumerate() {
            let bases: Vec<usize> = s.row(b).iter().map(|&j| n_a + j).collect();
            for (local, &j) in s.row(b).iter().enumerate() {
                base_owner[j] = (k, local);
            }
            if b >= n_a {
                lowers.push(Hierarchy::singleton(self.id(b), self.level(b)));
                lower_maps.push(vec![b]);
                continue;
            }
            let aggs: Vec<usize> = std::iter::once(b).chain(lower_aggs[k].iter().copied()).collect();
            let mut aggs_sorted = aggs.clone();
            aggs_sorted.sort_unstable();
            let row_b = s.row(b);
            let coverage = |u: usize| -> Vec<usize> {
                s.row(u).iter().map(|j| row_b.binary_search(j).expect("base inside lower")).collect()
            };
            let h = self.sub_hierarchy(&aggs_sorted, &bases, coverage)?;
            lower_maps.push(aggs_sorted.iter().chain(bases.iter()).copied().collect());
            lowers.push(h);
        }

        // Level → side.
        let mut assignment = ForecastAssignment::default();
        let upper_set: BTreeSet<usize> = upper_map.iter().copied().collect();
        let non_nesting_set: BTreeSet<usize> = non_nesting.iter().copied().collect();
        for label in self.level_order() {
            let rows = self.rows_in_level(label);
            let all_upper = rows.iter().all(|r| upper_set.contains(r));
            let side = if all_upper { Side::Upper } else { Side::Lower };
            if rows.iter().any(|r| non_nesting_set.contains(r)) {
                assignment.non_nesting.insert(label.clone());
            }
            assignment.sides.insert(label.clone(), side);
        }

        Ok(SubHierarchyPartition {
            boundary_level: boundary_level.to_string(),
            upper,
            upper_map,
            lowers,
            lower_maps,
            boundary,
            base_owner,
            non_nesting_series: non_nesting,
            forecast_assignment: assignment,
            n_a_orig: n_a,
        })
    }

    /// Restricts the hierarchy to `aggs` over `bases` (both original indices,
    /// aggregates in original order). `coverage(u)` lists the positions in
    /// `bases` an aggregate must cover; edges missing from the restricted graph
    /// are added as direct edges.
    fn sub_hierarchy<F>(&self, aggs: &[usize], bases: &[usize], coverage: F) -> Result<Hierarchy>
    where
        F: Fn(usize) -> Vec<usize>,
    {
        let n_sub = aggs.len() + bases.len();
        let mut local = std::collections::HashMap::with_capacity(n_sub);
        for (i, &o) in aggs.iter().chain(bases.iter()).enumerate() {
            local.insert(o, i);
        }
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_sub];
        for (li, &a) in aggs.iter().enumerate() {
            for &c in self.children(a) {
                if let Some(&lc) = local.get(&c) {
                    children[li].push(lc);
                }
            }
        }
        // Reachable bases through the restricted edges, deepest aggregates first.
        let na = aggs.len();
        let mut reach: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_sub];
        for i in na..n_sub {
            reach[i].insert(i - na);
        }
        // `aggs` is in original (depth-sorted) order, so reverse order visits
        // children before parents.
        for i in (0..na).rev() {
            let mut r = BTreeSet::new();
            for &c in &children[i] {
                r.extend(reach[c].iter().copied());
            }
            reach[i] = r;
        }
        for (li, &a) in aggs.iter().enumerate() {
            let want = coverage(a);
            for k in want {
                if !reach[li].contains(&k) {
                    children[li].push(na + k);
                }
            }
        }
        let ids = aggs.iter().chain(bases.iter()).map(|&o| self.id(o).to_string()).collect();
        let labels = aggs.iter().chain(bases.iter()).map(|&o| self.level(o).to_string()).collect();
        Hierarchy::assemble(ids, na, children, labels)
    }
}
