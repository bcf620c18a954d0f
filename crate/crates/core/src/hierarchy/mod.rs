//! Aggregation structure: series ordering, summing matrix, ancestry and
//! sub-hierarchy partitions.
//!
//! Series are ordered aggregates first (by depth, then first appearance in
//! the edge list) followed by base series in first-appearance order, so the
//! full observation vector is `y = [a; b]` and `S` is deterministic.

mod partition;
mod summing;

use std::collections::{BTreeMap, HashMap, HashSet};

pub use partition::{ForecastAssignment, Side, SubHierarchyPartition};
pub use summing::SummingMatrix;

use crate::error::{Error, Result};

/// Label given to base series when no explicit level is supplied.
pub const BASE_LEVEL: &str = "base";

#[derive(Debug, Clone)]
pub struct Hierarchy {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    n_a: usize,
    levels: Vec<String>,
    level_order: Vec<String>,
    children: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
    summing: SummingMatrix,
    ancestors: Vec<Vec<usize>>,
}

impl Hierarchy {
    /// Builds a hierarchy from `parent → child` edges. Series that never
    /// appear as a parent are the base series.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self> {
        Self::build(edges, &BTreeMap::new(), |_, has_children| !has_children)
    }

    /// Like [`Hierarchy::from_edges`] with explicit level labels (missing
    /// labels fall back to depth-based defaults).
    pub fn from_edges_with_levels<S: AsRef<str>>(
        edges: &[(S, S)],
        labels: &BTreeMap<String, String>,
    ) -> Result<Self> {
        Self::build(edges, labels, |_, has_children| !has_children)
    }

    /// General constructor. `is_base(id, has_children)` marks base series; a
    /// marked series must be a leaf and every leaf must be marked.
    pub fn build<S, F>(edges: &[(S, S)], labels: &BTreeMap<String, String>, is_base: F) -> Result<Self>
    where
        S: AsRef<str>,
        F: Fn(&str, bool) -> bool,
    {
        if edges.is_empty() {
            return Err(Error::Hierarchy("edge list is empty".into()));
        }
        let mut order: Vec<String> = Vec::new();
        let mut idx: HashMap<String, usize> = HashMap::new();
        let mut intern = |id: &str, order: &mut Vec<String>| -> usize {
            if let Some(&i) = idx.get(id) {
                return i;
            }
            idx.insert(id.to_string(), order.len());
            order.push(id.to_string());
            order.len() - 1
        };
        let mut children: Vec<Vec<usize>> = Vec::new();
        let mut seen_edges = HashSet::new();
        for (p, c) in edges {
            let (p, c) = (p.as_ref().trim(), c.as_ref().trim());
            if p.is_empty() || c.is_empty() {
                return Err(Error::Hierarchy("empty series id in edge list".into()));
            }
            let pi = intern(p, &mut order);
            let ci = intern(c, &mut order);
            if children.len() < order.len() {
                children.resize(order.len(), Vec::new());
            }
            if !seen_edges.insert((pi, ci)) {
                return Err(Error::Hierarchy(format!("duplicate edge {p} -> {c}")));
            }
            children[pi].push(ci);
        }
        let n = order.len();
        let topo = topological(&children).map_err(|i| Error::Cycle(order[i].clone()))?;
        let depth = depths(&children, &topo);

        let mut has_parent = vec![false; n];
        for ch in &children {
            for &c in ch {
                has_parent[c] = true;
            }
        }
        let mut base = Vec::new();
        let mut aggs = Vec::new();
        for i in 0..n {
            let leaf = children[i].is_empty();
            let marked = is_base(&order[i], !leaf);
            match (marked, leaf) {
                (true, true) => {
                    if !has_parent[i] {
                        return Err(Error::Hierarchy(format!("orphan base series `{}`", order[i])));
                    }
                    base.push(i)
                }
                (true, false) => {
                    return Err(Error::Hierarchy(format!(
                        "series `{}` is marked as base but has children",
                        order[i]
                    )))
                }
                (false, true) => {
                    return Err(Error::Hierarchy(format!(
                        "aggregate `{}` has no children",
                        order[i]
                    )))
                }
                (false, false) => aggs.push(i),
            }
        }
        aggs.sort_by_key(|&i| (depth[i], i));

        let perm: Vec<usize> = aggs.iter().chain(base.iter()).copied().collect();
        let mut new_index = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            new_index[old] = new;
        }
        let ids: Vec<String> = perm.iter().map(|&o| order[o].clone()).collect();
        let new_children: Vec<Vec<usize>> = perm
            .iter()
            .map(|&o| children[o].iter().map(|&c| new_index[c]).collect())
            .collect();
        let labels: Vec<String> = perm
            .iter()
            .map(|&o| match labels.get(&order[o]) {
                Some(l) => l.clone(),
                None if children[o].is_empty() => BASE_LEVEL.to_string(),
                None => format!("L{}", depth[o]),
            })
            .collect();
        Self::assemble(ids, aggs.len(), new_children, labels)
    }

    /// A hierarchy with a single base series and no aggregates.
    pub fn singleton(id: &str, label: &str) -> Self {
        Self::assemble(vec![id.to_string()], 0, vec![Vec::new()], vec![label.to_string()])
            .expect("singleton hierarchy is always valid")
    }

    /// Assembles an already-ordered hierarchy (aggregates first, topological).
    pub(crate) fn assemble(
        ids: Vec<String>,
        n_a: usize,
        children: Vec<Vec<usize>>,
        levels: Vec<String>,
    ) -> Result<Self> {
        let n = ids.len();
        let n_b = n - n_a;
        let mut index = HashMap::with_capacity(n);
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let mut parents = vec![Vec::new(); n];
        for (p, ch) in children.iter().enumerate() {
            for &c in ch {
                parents[c].push(p);
            }
        }
        let topo = topological(&children).map_err(|i| Error::Cycle(ids[i].clone()))?;
        let depth = depths(&children, &topo);

        // Descendant base sets, children before parents.
        let mut desc: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &v in topo.iter().rev() {
            if v >= n_a {
                desc[v] = vec![v - n_a];
                continue;
            }
            let mut set: Vec<usize> = children[v].iter().flat_map(|&c| desc[c].iter().copied()).collect();
            set.sort_unstable();
            set.dedup();
            desc[v] = set;
        }
        for (v, d) in desc.iter().enumerate().take(n_a) {
            if d.is_empty() {
                return Err(Error::Hierarchy(format!("aggregate `{}` covers no base series", ids[v])));
            }
        }
        let summing = SummingMatrix::from_aggregate_rows(n_b, desc[..n_a].to_vec())?;

        let mut level_key: BTreeMap<&str, (bool, usize, usize)> = BTreeMap::new();
        for i in 0..n {
            let key = (i >= n_a, depth[i], i);
            level_key
                .entry(levels[i].as_str())
                .and_modify(|k| {
                    if key < *k {
                        *k = key
                    }
                })
                .or_insert(key);
        }
        let mut level_order: Vec<(&str, (bool, usize, usize))> = level_key.into_iter().collect();
        level_order.sort_by_key(|&(_, k)| k);
        let level_order: Vec<String> = level_order.into_iter().map(|(l, _)| l.to_string()).collect();
        let rank: HashMap<&str, usize> = level_order.iter().enumerate().map(|(r, l)| (l.as_str(), r)).collect();

        let mut ancestors = vec![Vec::new(); n_b];
        for a in 0..n_a {
            for &j in summing.row(a) {
                ancestors[j].push(a);
            }
        }
        for (j, anc) in ancestors.iter_mut().enumerate() {
            anc.sort_by_key(|&a| (rank[levels[a].as_str()], a));
            anc.push(n_a + j);
        }

        Ok(Self {
            ids,
            index,
            n_a,
            levels,
            level_order,
            children,
            parents,
            summing,
            ancestors,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_b(&self) -> usize {
        self.ids.len() - self.n_a
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn base_ids(&self) -> &[String] {
        &self.ids[self.n_a..]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn is_base(&self, i: usize) -> bool {
        i >= self.n_a
    }

    pub fn level(&self, i: usize) -> &str {
        &self.levels[i]
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    /// Distinct level labels, top of the hierarchy first.
    pub fn level_order(&self) -> &[String] {
        &self.level_order
    }

    /// Series indices carrying a level label, in series order.
    pub fn rows_in_level(&self, label: &str) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.levels[i] == label).collect()
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub fn summing(&self) -> &SummingMatrix {
        &self.summing
    }

    /// Aggregates containing base series `base_index`, top level first (ties
    /// in series order), followed by the series' own index.
    pub fn ancestors(&self, base_index: usize) -> &[usize] {
        &self.ancestors[base_index]
    }

    /// Edges as `(parent, child)` id pairs, in series order.
    pub fn edges(&self) -> Vec<(&str, &str)> {
        self.children
            .iter()
            .enumerate()
            .flat_map(|(p, ch)| ch.iter().map(move |&c| (p, c)))
            .map(|(p, c)| (self.ids[p].as_str(), self.ids[c].as_str()))
            .collect()
    }

    /// `y = S b` for one time point.
    pub fn aggregate(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.summing.mul_vec(b)
    }
}

/// Summing matrix of a hierarchy.
pub fn summing_matrix(h: &Hierarchy) -> &SummingMatrix {
    h.summing()
}

/// Aggregates a panel of base observations (rows are time points).
pub fn aggregate(s: &SummingMatrix, b_panel: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    b_panel.iter().map(|b| s.mul_vec(b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coherence {
    pub coherent: bool,
    pub max_violation: f64,
}

/// Checks `max_t ‖y_t − S·y_t[base]‖∞ ≤ tol`.
pub fn check_coherence(y_panel: &[Vec<f64>], s: &SummingMatrix, tol: f64) -> Result<Coherence> {
    let mut worst = 0.0f64;
    for y in y_panel {
        if y.len() != s.n() {
            return Err(Error::dim("coherence check", s.n(), y.len()));
        }
        let implied = s.mul_vec(&y[s.n_a()..])?;
        for (a, b) in y.iter().zip(&implied) {
            let d = (a - b).abs();
            if d.is_nan() {
                worst = f64::INFINITY;
            } else {
                worst = worst.max(d);
            }
        }
    }
    Ok(Coherence {
        coherent: worst <= tol,
        max_violation: worst,
    })
}

/// Kahn's algorithm; on failure returns a node that lies on a cycle.
fn topological(children: &[Vec<usize>]) -> std::result::Result<Vec<usize>, usize> {
    let n = children.len();
    let mut indeg = vec![0usize; n];
    for ch in children {
        for &c in ch {
            indeg[c] += 1;
        }
    }
    let mut queue: std::collections::VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut out = Vec::with_capacity(n);
    while let Some(v) = queue.pop_front() {
        out.push(v);
        for &c in &children[v] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if out.len() == n {
        Ok(out)
    } else {
        Err((0..n).find(|&i| indeg[i] > 0).unwrap_or(0))
    }
}

/// Longest path length from any root.
fn depths(children: &[Vec<usize>], topo: &[usize]) -> Vec<usize> {
    let mut depth = vec![0usize; children.len()];
    for &v in topo {
        for &c in &children[v] {
            depth[c] = depth[c].max(depth[v] + 1);
        }
    }
    depth
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// T → {A, B, C}; A → A1..A4; B → B1..B3; C → C1..C3.
    pub fn fig1() -> Hierarchy {
        let mut edges = vec![("T", "A"), ("T", "B"), ("T", "C")];
        edges.extend([("A", "A1"), ("A", "A2"), ("A", "A3"), ("A", "A4")]);
        edges.extend([("B", "B1"), ("B", "B2"), ("B", "B3")]);
        edges.extend([("C", "C1"), ("C", "C2"), ("C", "C3")]);
        Hierarchy::from_edges(&edges).unwrap()
    }

    pub fn two_base() -> Hierarchy {
        Hierarchy::from_edges(&[("T", "A"), ("T", "B")]).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fig1_counts_and_order() {
        let h = fig1();
        assert_eq!((h.n_a(), h.n_b(), h.n()), (4, 10, 14));
        assert_eq!(&h.ids()[..4], &["T", "A", "B", "C"]);
        assert_eq!(h.base_ids()[0], "A1");
        assert_eq!(h.level_order(), &["L0", "L1", "base"]);
    }

    #[test]
    fn two_base_summing_matrix() {
        let h = two_base();
        assert_eq!((h.n_a(), h.n_b()), (1, 2));
        let s = h.summing().to_dense(10).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]); // column-major
    }

    #[test]
    fn fig1_row_for_a() {
        let h = fig1();
        let a = h.index_of("A").unwrap();
        let row = h.summing().row_dense(a);
        let expect: Vec<f64> = (0..10).map(|j| if j < 4 { 1.0 } else { 0.0 }).collect();
        assert_eq!(row.as_slice(), expect.as_slice());
    }

    #[test]
    fn self_loop_is_a_cycle() {
        assert!(matches!(Hierarchy::from_edges(&[("X", "X")]), Err(Error::Cycle(_))));
        assert!(matches!(
            Hierarchy::from_edges(&[("X", "Y"), ("Y", "Z"), ("Z", "X")]),
            Err(Error::Cycle(_))
        ));
    }

    #[test]
    fn empty_and_duplicate_edges_rejected() {
        let none: [(&str, &str); 0] = [];
        assert!(Hierarchy::from_edges(&none).is_err());
        assert!(Hierarchy::from_edges(&[("T", "A"), ("T", "A")]).is_err());
    }

    #[test]
    fn base_marker_must_agree_with_structure() {
        let e = [("T", "A"), ("A", "A1")];
        let err = Hierarchy::build(&e, &BTreeMap::new(), |id, _| id == "A" || id == "A1");
        assert!(err.is_err());
        let err = Hierarchy::build(&e, &BTreeMap::new(), |_, _| false);
        assert!(err.is_err());
    }

    #[test]
    fn single_base_series() {
        let h = Hierarchy::singleton("X", "base");
        assert_eq!(h.summing().to_dense(10).unwrap(), nalgebra::DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn aggregate_examples() {
        let s = two_base().summing().clone();
        assert_eq!(s.mul_vec(&[1.0, 2.0]).unwrap(), vec![3.0, 1.0, 2.0]);
        assert_eq!(s.mul_vec(&[0.0, 0.0]).unwrap(), vec![0.0; 3]);
        let h = fig1();
        let y = h.aggregate(&[1.0; 10]).unwrap();
        assert_eq!(&y[..4], &[10.0, 4.0, 3.0, 3.0]);
        assert!(s.mul_vec(&[1.0]).is_err());
    }

    #[test]
    fn ancestors_top_first_own_last() {
        let h = fig1();
        let a2 = h.index_of("A2").unwrap() - h.n_a();
        let names: Vec<&str> = h.ancestors(a2).iter().map(|&i| h.id(i)).collect();
        assert_eq!(names, vec!["T", "A", "A2"]);
        let h = two_base();
        let names: Vec<&str> = h.ancestors(0).iter().map(|&i| h.id(i)).collect();
        assert_eq!(names, vec!["T", "A"]);
    }

    #[test]
    fn grouped_structure_two_parents_per_level() {
        // Region and product groupings over the same four base series.
        let mut labels = BTreeMap::new();
        for (id, l) in [("T", "total"), ("R1", "mid"), ("R2", "mid"), ("P1", "mid"), ("P2", "mid")] {
            labels.insert(id.to_string(), l.to_string());
        }
        let edges = [
            ("T", "R1"),
            ("T", "R2"),
            ("T", "P1"),
            ("T", "P2"),
            ("R1", "x11"),
            ("R1", "x12"),
            ("R2", "x21"),
            ("R2", "x22"),
            ("P1", "x11"),
            ("P1", "x21"),
            ("P2", "x12"),
            ("P2", "x22"),
        ];
        let h = Hierarchy::from_edges_with_levels(&edges, &labels).unwrap();
        assert_eq!(h.n_b(), 4);
        let x21 = h.index_of("x21").unwrap() - h.n_a();
        let names: Vec<&str> = h.ancestors(x21).iter().map(|&i| h.id(i)).collect();
        assert_eq!(names, vec!["T", "R2", "P1", "x21"]);
        // S rows stay 0/1 even though T is reachable twice.
        assert_eq!(h.summing().row(0), &[0, 1, 2, 3]);
    }

    #[test]
    fn coherence_examples() {
        let s = two_base().summing().clone();
        let ok = check_coherence(&[s.mul_vec(&[1.0, 2.0]).unwrap()], &s, 0.0).unwrap();
        assert!(ok.coherent);
        let bad = check_coherence(&[vec![3.1, 1.0, 2.0]], &s, 1e-9).unwrap();
        assert!(!bad.coherent);
        assert!((bad.max_violation - 0.1).abs() < 1e-12);
    }

    fn random_hierarchy() -> impl Strategy<Value = Hierarchy> {
        // Root → m mids → leaves per mid.
        prop::collection::vec(1usize..5, 1..5).prop_map(|sizes| {
            let mut edges = Vec::new();
            for (m, &k) in sizes.iter().enumerate() {
                edges.push(("T".to_string(), format!("M{m}")));
                for j in 0..k {
                    edges.push((format!("M{m}"), format!("M{m}_{j}")));
                }
            }
            Hierarchy::from_edges(&edges).unwrap()
        })
    }

    proptest! {
        #[test]
        fn aggregate_rows_equal_c_times_b(h in random_hierarchy(), seed in any::<u64>()) {
            let n_b = h.n_b();
            let b: Vec<f64> = (0..n_b).map(|j| ((seed >> (j % 60)) & 0xff) as f64 - 100.0).collect();
            let y = h.aggregate(&b).unwrap();
            prop_assert_eq!(&y[h.n_a()..], b.as_slice());
            for a in 0..h.n_a() {
                let manual: f64 = h.children(a).iter().map(|&c| y[c]).sum();
                prop_assert_eq!(y[a], manual);
            }
        }

        #[test]
        fn ancestors_share_root(h in random_hierarchy()) {
            for i in 0..h.n_b() {
                for j in 0..h.n_b() {
                    let ai = h.ancestors(i);
                    prop_assert!(ai.contains(&0) && h.ancestors(j).contains(&0));
                }
            }
        }
    }
}
