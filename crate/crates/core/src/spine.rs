//! Rooted tree with uniform leaf depth.
//!
//! Vertices are dense ids `0..V`. Children are kept sorted ascending by id so
//! every summation over siblings happens in one fixed order.

use std::collections::VecDeque;

use crate::error::{Error, Result};

pub type VertexId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tree {
    root: VertexId,
    parent: Vec<Option<VertexId>>,
    children: Vec<Vec<VertexId>>,
    level: Vec<usize>,
    levels: Vec<Vec<VertexId>>,
    /// Position of each leaf in `levels[depth]`, `usize::MAX` for interior vertices.
    leaf_index: Vec<usize>,
}

impl Tree {
    /// Build a tree from `(child, parent)` pairs.
    ///
    /// Ids must be dense: with `k` pairs the vertex set is exactly `0..=k`.
    pub fn build(parent_pairs: &[(VertexId, VertexId)], root: VertexId) -> Result<Self> {
        let v = parent_pairs.len() + 1;
        if root >= v {
            return Err(Error::OrphanVertex(root, v));
        }
        let mut parent: Vec<Option<VertexId>> = vec![None; v];
        let mut seen = vec![false; v];
        seen[root] = true;
        for &(child, par) in parent_pairs {
            if child >= v {
                return Err(Error::OrphanVertex(child, v));
            }
            if par >= v {
                return Err(Error::OrphanVertex(par, v));
            }
            if seen[child] {
                return Err(Error::DuplicateVertex(child));
            }
            seen[child] = true;
            parent[child] = Some(par);
        }
        // every id in 0..v was declared exactly once, so `seen` is all true here

        let mut children: Vec<Vec<VertexId>> = vec![Vec::new(); v];
        for (c, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(c);
            }
        }
        // enumerate() visits ids ascending, so each child list is already sorted

        let mut level = vec![usize::MAX; v];
        level[root] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(g) = queue.pop_front() {
            for &c in &children[g] {
                level[c] = level[g] + 1;
                queue.push_back(c);
            }
        }
        if let Some(unreached) = level.iter().position(|&l| l == usize::MAX) {
            return Err(Error::CycleDetected(unreached));
        }

        let depth = level.iter().copied().max().unwrap_or(0);
        for g in 0..v {
            if children[g].is_empty() && level[g] != depth {
                return Err(Error::NonUniformLeafDepth {
                    leaf: g,
                    depth: level[g],
                    expected: depth,
                });
            }
        }

        let mut levels: Vec<Vec<VertexId>> = vec![Vec::new(); depth + 1];
        for g in 0..v {
            levels[level[g]].push(g);
        }
        let mut leaf_index = vec![usize::MAX; v];
        for (i, &g) in levels[depth].iter().enumerate() {
            leaf_index[g] = i;
        }

        Ok(Self {
            root,
            parent,
            children,
            level,
            levels,
            leaf_index,
        })
    }

    /// Single-vertex tree.
    pub fn singleton() -> Self {
        Self::build(&[], 0).expect("singleton tree is valid")
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn root(&self) -> VertexId {
        self.root
    }

    /// Number of edges between any leaf and the root.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn parent(&self, g: VertexId) -> Option<VertexId> {
        self.parent[g]
    }

    pub fn children(&self, g: VertexId) -> &[VertexId] {
        &self.children[g]
    }

    pub fn level_of(&self, g: VertexId) -> usize {
        self.level[g]
    }

    pub fn level(&self, l: usize) -> &[VertexId] {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[Vec<VertexId>] {
        &self.levels
    }

    /// Leaves in ascending id order.
    pub fn leaves(&self) -> &[VertexId] {
        &self.levels[self.depth()]
    }

    pub fn is_leaf(&self, g: VertexId) -> bool {
        self.children[g].is_empty()
    }

    /// Position of `g` among the leaves.
    pub fn leaf_index(&self, g: VertexId) -> Option<usize> {
        match self.leaf_index.get(g) {
            Some(&i) if i != usize::MAX => Some(i),
            _ => None,
        }
    }

    pub fn contains(&self, g: VertexId) -> bool {
        g < self.len()
    }

    pub(crate) fn check(&self, g: VertexId) -> Result<()> {
        if self.contains(g) {
            Ok(())
        } else {
            Err(Error::UnknownVertex(g))
        }
    }

    /// `(child, parent)` pairs in ascending child order, suitable for [`Tree::build`].
    pub fn parent_pairs(&self) -> Vec<(VertexId, VertexId)> {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (c, p)))
            .collect()
    }

    /// Ancestor of `g` (or `g` itself) at level `l`. Requires `l <= level_of(g)`.
    pub fn ancestor_at_level(&self, mut g: VertexId, l: usize) -> VertexId {
        debug_assert!(l <= self.level[g]);
        while self.level[g] > l {
            g = self.parent[g].expect("non-root has a parent");
        }
        g
    }

    /// Whether `a` is `d` or an ancestor of `d`.
    pub fn is_ancestor_or_self(&self, a: VertexId, d: VertexId) -> bool {
        self.level[a] <= self.level[d] && self.ancestor_at_level(d, self.level[a]) == a
    }

    /// Deepest vertex that is an ancestor-or-self of both `u` and `v`.
    pub fn closest_common_ancestor(&self, u: VertexId, v: VertexId) -> Result<VertexId> {
        self.check(u)?;
        self.check(v)?;
        let l = self.level[u].min(self.level[v]);
        let mut a = self.ancestor_at_level(u, l);
        let mut b = self.ancestor_at_level(v, l);
        while a != b {
            a = self.parent[a].expect("distinct vertices below the root");
            b = self.parent[b].expect("distinct vertices below the root");
        }
        Ok(a)
    }

    /// Vertices from `u` up to (and including) its ancestor `a`.
    pub(crate) fn upward_path(&self, mut u: VertexId, a: VertexId) -> Vec<VertexId> {
        let mut path = Vec::with_capacity(self.level[u] - self.level[a] + 1);
        path.push(u);
        while u != a {
            u = self.parent[u].expect("a is an ancestor of u");
            path.push(u);
        }
        path
    }

    /// Shortest path from `u` to `v`; first element `u`, last `v`.
    pub fn shortest_path(&self, u: VertexId, v: VertexId) -> Result<Vec<VertexId>> {
        let w = self.closest_common_ancestor(u, v)?;
        let mut path = self.upward_path(u, w);
        let mut down = self.upward_path(v, w);
        down.pop();
        path.extend(down.into_iter().rev());
        Ok(path)
    }

    /// Leaves in the subtree rooted at `g`, ascending.
    pub fn descendant_leaves(&self, g: VertexId) -> Vec<VertexId> {
        let mut frontier = vec![g];
        for _ in self.level[g]..self.depth() {
            frontier = frontier
                .iter()
                .flat_map(|&x| self.children[x].iter().copied())
                .collect();
        }
        frontier.sort_unstable();
        frontier
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{BTreeSet, HashMap};

    fn example1() -> Tree {
        Tree::build(&[(1, 0), (2, 0)], 0).unwrap()
    }

    fn binary7() -> Tree {
        Tree::build(&[(1, 0), (2, 0), (3, 1), (4, 1), (5, 2), (6, 2)], 0).unwrap()
    }

    #[test]
    fn example1_levels() {
        let t = example1();
        assert_eq!(t.depth(), 1);
        assert_eq!(t.level(0), &[0]);
        assert_eq!(t.level(1), &[1, 2]);
        assert_eq!(t.leaves(), &[1, 2]);
    }

    #[test]
    fn singleton_and_chain() {
        let t = Tree::build(&[], 0).unwrap();
        assert_eq!(t.depth(), 0);
        assert_eq!(t.len(), 1);
        assert_eq!(t.leaves(), &[0]);

        let c = Tree::build(&[(1, 0), (2, 1)], 0).unwrap();
        assert_eq!(c.depth(), 2);
        assert_eq!(c.leaves(), &[2]);
    }

    #[test]
    fn children_sorted_regardless_of_input_order() {
        let t = Tree::build(&[(2, 0), (3, 0), (1, 0)], 0).unwrap();
        assert_eq!(t.children(0), &[1, 2, 3]);
    }

    #[test]
    fn non_zero_root() {
        let t = Tree::build(&[(0, 2), (1, 2)], 2).unwrap();
        assert_eq!(t.root(), 2);
        assert_eq!(t.leaves(), &[0, 1]);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            Tree::build(&[(1, 0), (1, 0)], 0),
            Err(Error::DuplicateVertex(1)) | Err(Error::OrphanVertex(..))
        ));
        assert!(matches!(
            Tree::build(&[(1, 0), (0, 1)], 0),
            Err(Error::DuplicateVertex(0))
        ));
        assert!(matches!(
            Tree::build(&[(1, 0), (5, 0)], 0),
            Err(Error::OrphanVertex(5, 3))
        ));
        // 1 and 2 point at each other; 0 is the declared root
        assert!(matches!(
            Tree::build(&[(1, 2), (2, 1)], 0),
            Err(Error::CycleDetected(_))
        ));
        // leaf 1 at depth 1, leaf 3 at depth 2
        assert!(matches!(
            Tree::build(&[(1, 0), (2, 0), (3, 2)], 0),
            Err(Error::NonUniformLeafDepth { leaf: 1, depth: 1, expected: 2 })
        ));
    }

    #[test]
    fn duplicate_child_reported() {
        // three pairs -> ids 0..=3; child 2 declared twice, id 3 never appears
        let err = Tree::build(&[(1, 0), (2, 0), (2, 1)], 0).unwrap_err();
        assert!(matches!(err, Error::DuplicateVertex(2)));
    }

    #[test]
    fn cca_examples() {
        let t = example1();
        assert_eq!(t.closest_common_ancestor(1, 2).unwrap(), 0);
        assert_eq!(t.closest_common_ancestor(1, 1).unwrap(), 1);
        let b = binary7();
        assert_eq!(b.closest_common_ancestor(3, 6).unwrap(), 0);
        assert_eq!(b.closest_common_ancestor(3, 4).unwrap(), 1);
        assert_eq!(b.closest_common_ancestor(3, 1).unwrap(), 1);
        assert!(matches!(
            b.closest_common_ancestor(3, 9),
            Err(Error::UnknownVertex(9))
        ));
    }

    #[test]
    fn path_examples() {
        let b = binary7();
        assert_eq!(b.shortest_path(3, 6).unwrap(), vec![3, 1, 0, 2, 6]);
        assert_eq!(b.shortest_path(4, 4).unwrap(), vec![4]);
        assert_eq!(b.shortest_path(3, 1).unwrap(), vec![3, 1]);
        assert_eq!(b.shortest_path(0, 5).unwrap(), vec![0, 2, 5]);
        assert!(b.shortest_path(0, 7).is_err());
    }

    #[test]
    fn descendant_leaves_of_interior() {
        let b = binary7();
        assert_eq!(b.descendant_leaves(0), vec![3, 4, 5, 6]);
        assert_eq!(b.descendant_leaves(2), vec![5, 6]);
        assert_eq!(b.descendant_leaves(5), vec![5]);
    }

    /// Random tree with uniform leaf depth and shuffled ids.
    fn arb_tree() -> impl Strategy<Value = Tree> {
        (1usize..=4, prop::collection::vec(1usize..=3, 12), any::<u64>()).prop_map(
            |(depth, fanouts, seed)| {
                // level-by-level growth with per-vertex fanout drawn from `fanouts`
                let mut pairs = Vec::new();
                let mut frontier = vec![0usize];
                let mut next_id = 1usize;
                let mut f = 0usize;
                for _ in 0..depth {
                    let mut nf = Vec::new();
                    for &p in &frontier {
                        let k = fanouts[f % fanouts.len()];
                        f += 1;
                        for _ in 0..k {
                            if next_id >= 50 {
                                break;
                            }
                            pairs.push((next_id, p));
                            nf.push(next_id);
                            next_id += 1;
                        }
                    }
                    frontier = nf;
                }
                // permute ids deterministically
                let v = next_id;
                let mut perm: Vec<usize> = (0..v).collect();
                let mut s = seed | 1;
                for i in (1..v).rev() {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    perm.swap(i, (s % (i as u64 + 1)) as usize);
                }
                let pairs: Vec<_> = pairs.iter().map(|&(c, p)| (perm[c], perm[p])).collect();
                Tree::build(&pairs, perm[0])
            },
        )
        .prop_filter_map("uniform depth", |t| t.ok())
    }

    fn ancestors_oracle(t: &Tree, mut u: usize) -> Vec<usize> {
        let parents: HashMap<usize, usize> = t.parent_pairs().into_iter().collect();
        let mut out = vec![u];
        while let Some(&p) = parents.get(&u) {
            out.push(p);
            u = p;
        }
        out
    }

    fn bfs_path_oracle(t: &Tree, u: usize, v: usize) -> Vec<usize> {
        let n = t.len();
        let mut adj = vec![Vec::new(); n];
        for (c, p) in t.parent_pairs() {
            adj[c].push(p);
            adj[p].push(c);
        }
        let mut prev = vec![usize::MAX; n];
        let mut q = VecDeque::from([u]);
        prev[u] = u;
        while let Some(x) = q.pop_front() {
            for &y in &adj[x] {
                if prev[y] == usize::MAX {
                    prev[y] = x;
                    q.push_back(y);
                }
            }
        }
        let mut path = vec![v];
        let mut x = v;
        while x != u {
            x = prev[x];
            path.push(x);
        }
        path.reverse();
        path
    }

    proptest! {
        #[test]
        fn cca_and_path_match_brute_force(t in arb_tree(), a in any::<usize>(), b in any::<usize>()) {
            let u = a % t.len();
            let v = b % t.len();
            let au = ancestors_oracle(&t, u);
            let av: BTreeSet<usize> = ancestors_oracle(&t, v).into_iter().collect();
            let expected = *au.iter().find(|x| av.contains(x)).unwrap();
            let w = t.closest_common_ancestor(u, v).unwrap();
            prop_assert_eq!(w, expected);
            prop_assert!(t.level_of(w) <= t.level_of(u).min(t.level_of(v)));

            let p = t.shortest_path(u, v).unwrap();
            prop_assert_eq!(&p, &bfs_path_oracle(&t, u, v));
            prop_assert!(p.contains(&w));
            let mut back = t.shortest_path(v, u).unwrap();
            back.reverse();
            prop_assert_eq!(p, back);
        }
    }
}
