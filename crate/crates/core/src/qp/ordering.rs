//! Fill-reducing ordering for the KKT factorization.
//!
//! Reverse Cuthill-McKee on the KKT adjacency graph keeps the factor profile
//! tight for the time-chained problems this crate assembles; the first-stage
//! coupling block lands near one end of the ordering where its fill stays
//! contained.

/// Symmetric adjacency built from the strictly-lower triangle entry list of a
/// symmetric matrix pattern.
pub struct Graph {
    pub n: usize,
    pub adj_ptr: Vec<usize>,
    pub adj: Vec<usize>,
}

impl Graph {
    /// `edges` holds (i, j) pairs with i != j; duplicates are tolerated.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut deg = vec![0usize; n];
        for &(i, j) in edges {
            debug_assert!(i != j && i < n && j < n);
            deg[i] += 1;
            deg[j] += 1;
        }
        let mut adj_ptr = vec![0usize; n + 1];
        for v in 0..n {
            adj_ptr[v + 1] = adj_ptr[v] + deg[v];
        }
        let mut adj = vec![0usize; adj_ptr[n]];
        let mut next = adj_ptr.clone();
        for &(i, j) in edges {
            adj[next[i]] = j;
            next[i] += 1;
            adj[next[j]] = i;
            next[j] += 1;
        }
        // Dedup neighbours so degrees used by RCM are exact.
        let mut dedup_adj = Vec::with_capacity(adj.len());
        let mut dedup_ptr = vec![0usize; n + 1];
        let mut mark = vec![usize::MAX; n];
        for v in 0..n {
            for k in adj_ptr[v]..adj_ptr[v + 1] {
                let u = adj[k];
                if mark[u] != v {
                    mark[u] = v;
                    dedup_adj.push(u);
                }
            }
            dedup_ptr[v + 1] = dedup_adj.len();
        }
        Self { n, adj_ptr: dedup_ptr, adj: dedup_adj }
    }

    fn degree(&self, v: usize) -> usize {
        self.adj_ptr[v + 1] - self.adj_ptr[v]
    }

    fn neighbours(&self, v: usize) -> &[usize] {
        &self.adj[self.adj_ptr[v]..self.adj_ptr[v + 1]]
    }
}

/// BFS returning (levels, reached count, last-level representative of
/// minimum degree) from `start`, restricted to unvisited nodes.
fn bfs(g: &Graph, start: usize, level: &mut [usize], queue: &mut Vec<usize>) -> (usize, usize) {
    level.iter_mut().for_each(|l| *l = usize::MAX);
    queue.clear();
    queue.push(start);
    level[start] = 0;
    let mut head = 0;
    let mut last = start;
    while head < queue.len() {
        let v = queue[head];
        head += 1;
        last = v;
        for &u in g.neighbours(v) {
            if level[u] == usize::MAX {
                level[u] = level[v] + 1;
                queue.push(u);
            }
        }
    }
    let depth = level[last];
    // Pick the min-degree node in the deepest level for the next sweep.
    let mut best = last;
    for &v in queue.iter().rev() {
        if level[v] != depth {
            break;
        }
        if g.degree(v) < g.degree(best) {
            best = v;
        }
    }
    (best, depth)
}

/// Pseudo-peripheral starting node for one connected component.
fn pseudo_peripheral(g: &Graph, seed: usize, level: &mut [usize], queue: &mut Vec<usize>) -> usize {
    let mut node = seed;
    let (mut cand, mut depth) = bfs(g, node, level, queue);
    for _ in 0..8 {
        let (next, d) = bfs(g, cand, level, queue);
        if d > depth {
            depth = d;
            node = cand;
            cand = next;
        } else {
            return cand;
        }
    }
    node
}

/// Reverse Cuthill-McKee permutation: `perm[new] = old`.
pub fn reverse_cuthill_mckee(g: &Graph) -> Vec<usize> {
    let n = g.n;
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let mut level = vec![usize::MAX; n];
    let mut scratch = Vec::with_capacity(n);
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.sort_by_key(|&v| g.degree(v));
    for &seed in &nodes {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(g, seed, &mut level, &mut scratch);
        // Standard CM BFS with neighbours expanded in degree order.
        let base = order.len();
        order.push(start);
        visited[start] = true;
        let mut head = base;
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut nbrs: Vec<usize> =
                g.neighbours(v).iter().copied().filter(|&u| !visited[u]).collect();
            nbrs.sort_by_key(|&u| (g.degree(u), u));
            for u in nbrs {
                if !visited[u] {
                    visited[u] = true;
                    order.push(u);
                }
            }
        }
    }
    order.reverse();
    order
}
