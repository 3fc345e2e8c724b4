//! Spinal decomposition: split a measured metric tree along the path from
//! the root to the marked vertex, yielding the off-spine components with
//! their mass fractions, rescaled into independent copies, recursively over
//! an address space of positive-integer strings.

use crate::derive_seed;
use crate::treegen::MetricTree;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecompError {
    #[error("no marked vertex: set one with pick_mass_vertex first")]
    NoMark,
    #[error("marked vertex equals the root; the spine is empty")]
    DegenerateSpine,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// Address in the decomposition tree: a string of 1-based sibling ranks.
pub type Address = Vec<u32>;

/// One component of a (possibly nested) spinal decomposition.
#[derive(Debug, Clone, Serialize)]
pub struct DecompRecord {
    pub address: Address,
    /// Mass fraction of this component relative to its parent tree.
    pub delta: f64,
    /// Product of `delta` along the address prefix chain.
    pub big_d: f64,
    /// The component, closed up by its attachment point (vertex 0, massless),
    /// rescaled: lengths multiplied by `delta^((1-alpha)/alpha)` and masses
    /// renormalised to total 1; `marked` is a fresh mass-random vertex.
    pub component: MetricTree,
    /// Spine vertices of the parent tree, ordered root to marked vertex.
    pub spine: Vec<u32>,
}

/// The spine: ordered vertex path from the root to the marked vertex, found
/// by undirected search.
pub fn spine(tree: &MetricTree) -> Result<Vec<u32>, DecompError> {
    let sigma = tree.marked.ok_or(DecompError::NoMark)?;
    if sigma == tree.root {
        return Err(DecompError::DegenerateSpine);
    }
    // BFS from the root over the undirected edge set.
    let (offsets, children) = tree.children_csr();
    let n = tree.len();
    let mut pred = vec![u32::MAX; n];
    pred[tree.root as usize] = tree.root;
    let mut queue = std::collections::VecDeque::from([tree.root]);
    'bfs: while let Some(v) = queue.pop_front() {
        let vi = v as usize;
        let mut neighbours: Vec<u32> =
            children[offsets[vi] as usize..offsets[vi + 1] as usize].to_vec();
        if v != tree.root {
            neighbours.push(tree.parent[vi]);
        }
        for w in neighbours {
            if pred[w as usize] == u32::MAX {
                pred[w as usize] = v;
                if w == sigma {
                    break 'bfs;
                }
                queue.push_back(w);
            }
        }
    }
    let mut path = vec![sigma];
    let mut v = sigma;
    while v != tree.root {
        v = pred[v as usize];
        path.push(v);
    }
    path.reverse();
    Ok(path)
}

/// Un-rescaled off-spine component: the parent tree restricted to the
/// component plus its attachment point (vertex 0, carrying zero mass), with
/// a fresh mass-random marked vertex.
#[derive(Debug, Clone)]
pub struct RawComponent {
    /// Spine vertex the component hangs off (parent-tree index).
    pub attach: u32,
    /// Parent-tree indices of the off-spine vertices, preceded by `attach`.
    pub vertices: Vec<u32>,
    /// Component mass as a fraction of the parent tree's total mass.
    pub delta: f64,
    pub tree: MetricTree,
}

/// A spinal split before any rescaling.
pub struct RawSplit {
    pub spine: Vec<u32>,
    /// Spine mass as a fraction of total mass.
    pub spine_mass: f64,
    /// Total length of the spine path.
    pub spine_length: f64,
    /// Components ordered by non-increasing `delta`, ties broken by smaller
    /// attachment vertex index.
    pub components: Vec<RawComponent>,
}

/// Split `tree` at its spine.  `seed` drives the fresh marked-vertex choice
/// inside each component (stream `i` for the component at rank `i`).
pub fn raw_split(tree: &MetricTree, seed: u64) -> Result<RawSplit, DecompError> {
    let spine = spine(tree)?;
    let n = tree.len();
    let total = tree.total_mass();
    if !(total > 0.0) {
        return Err(DecompError::InvalidParams("tree has zero total mass".into()));
    }
    let mut on_spine = vec![false; n];
    for &v in &spine {
        on_spine[v as usize] = true;
    }
    let spine_mass: f64 = spine.iter().map(|&v| tree.mass[v as usize]).sum::<f64>() / total;
    let spine_length: f64 = spine
        .iter()
        .filter(|&&v| {
            // each spine edge is recorded at its lower endpoint
            v != tree.root && on_spine[tree.parent[v as usize] as usize]
        })
        .map(|&v| tree.edge_length[v as usize])
        .sum();

    // Assign off-spine vertices to components by depth-first search from
    // each off-spine neighbour of a spine vertex.
    let (offsets, children) = tree.children_csr();
    let mut comp_of = vec![u32::MAX; n];
    let mut comps: Vec<(u32, Vec<u32>)> = Vec::new(); // (attach, members)
    let mut stack = Vec::new();
    for &s in &spine {
        let si = s as usize;
        let mut starts: Vec<u32> = children[offsets[si] as usize..offsets[si + 1] as usize]
            .iter()
            .cloned()
            .filter(|&c| !on_spine[c as usize])
            .collect();
        if s != tree.root && !on_spine[tree.parent[si] as usize] {
            starts.push(tree.parent[si]);
        }
        for start in starts {
            if comp_of[start as usize] != u32::MAX {
                continue;
            }
            let id = comps.len() as u32;
            let mut members = Vec::new();
            stack.push(start);
            comp_of[start as usize] = id;
            while let Some(v) = stack.pop() {
                members.push(v);
                let vi = v as usize;
                let mut neigh: Vec<u32> =
                    children[offsets[vi] as usize..offsets[vi + 1] as usize].to_vec();
                if v != tree.root {
                    neigh.push(tree.parent[vi]);
                }
                for w in neigh {
                    if !on_spine[w as usize] && comp_of[w as usize] == u32::MAX {
                        comp_of[w as usize] = id;
                        stack.push(w);
                    }
                }
            }
            comps.push((s, members));
        }
    }

    // Order by non-increasing mass; ties by smaller attachment index.
    let mut keyed: Vec<(f64, u32, usize)> = comps
        .iter()
        .enumerate()
        .map(|(i, (attach, members))| {
            let m: f64 = members.iter().map(|&v| tree.mass[v as usize]).sum();
            (m, *attach, i)
        })
        .collect();
    keyed.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });

    let mut components = Vec::with_capacity(keyed.len());
    for (rank, &(mass, attach, idx)) in keyed.iter().enumerate() {
        let members = &comps[idx].1;
        // Local indexing: 0 = attachment point, then members in sorted
        // parent-tree order for determinism.
        let mut verts = members.clone();
        verts.sort_unstable();
        let mut local = std::collections::HashMap::with_capacity(verts.len() + 1);
        local.insert(attach, 0u32);
        for (j, &v) in verts.iter().enumerate() {
            local.insert(v, j as u32 + 1);
        }
        let mut parent = vec![0u32; verts.len() + 1];
        let mut edge_length = vec![0.0; verts.len() + 1];
        let mut massv = vec![0.0; verts.len() + 1];
        for (j, &v) in verts.iter().enumerate() {
            let lj = j + 1;
            massv[lj] = tree.mass[v as usize];
            // Re-root at the attachment point: the unique neighbour of v on
            // the path toward `attach` becomes its parent.  Since components
            // hang off the spine in the original orientation except when the
            // tree root itself is interior to a component, the original
            // parent pointer is already correct for every member whose
            // parent is in the component or is `attach`.
            let pv = tree.parent[v as usize];
            if let Some(&lp) = local.get(&pv) {
                parent[lj] = lp;
                edge_length[lj] = tree.edge_length[v as usize];
            }
        }
        // Any member whose original parent is outside {component, attach}
        // would need re-rooting; that can only happen if the parent is a
        // non-attachment spine vertex, which contradicts connectivity of the
        // component, so the loop above covers all members.
        let mut comp_tree = MetricTree {
            parent,
            edge_length,
            mass: massv,
            root: 0,
            marked: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, rank as u64));
        comp_tree.pick_mass_vertex(&mut rng);
        components.push(RawComponent {
            attach,
            vertices: std::iter::once(attach).chain(verts).collect(),
            delta: mass / total,
            tree: comp_tree,
        });
    }

    Ok(RawSplit {
        spine,
        spine_mass,
        spine_length,
        components,
    })
}

/// One level of spinal decomposition with the stable rescaling applied.
/// Returns an empty list when every vertex lies on the spine.
pub fn decompose(tree: &MetricTree, alpha: f64, seed: u64) -> Result<Vec<DecompRecord>, DecompError> {
    if !(alpha > 1.0 && alpha <= 2.0) {
        return Err(DecompError::InvalidParams(format!("alpha = {alpha} not in (1,2]")));
    }
    let split = raw_split(tree, seed)?;
    Ok(split
        .components
        .into_iter()
        .enumerate()
        .map(|(rank, comp)| {
            let mut component = comp.tree;
            let len_scale = comp.delta.powf((1.0 - alpha) / alpha);
            let comp_mass: f64 = component.mass.iter().sum();
            for v in 0..component.len() {
                component.edge_length[v] *= len_scale;
                component.mass[v] /= comp_mass;
            }
            DecompRecord {
                address: vec![rank as u32 + 1],
                delta: comp.delta,
                big_d: comp.delta,
                component,
                spine: split.spine.clone(),
            }
        })
        .collect())
}

/// Apply [`decompose`] recursively, `depth` levels deep.  Components too
/// small to host a spine (fewer than 3 vertices, or with all vertices on
/// their own spine) are recursion leaves.
pub fn recurse(
    tree: &MetricTree,
    alpha: f64,
    depth: u32,
    seed: u64,
) -> Result<Vec<DecompRecord>, DecompError> {
    if depth == 0 {
        return Err(DecompError::InvalidParams("depth must be >= 1".into()));
    }
    let mut out = Vec::new();
    let mut frontier = decompose(tree, alpha, seed)?;
    for level in 1..depth {
        let mut next = Vec::new();
        for rec in &frontier {
            if rec.component.len() < 3 {
                continue;
            }
            let child_seed = derive_seed(seed, hash_address(&rec.address));
            let subs = match decompose(&rec.component, alpha, child_seed) {
                Ok(s) => s,
                Err(DecompError::DegenerateSpine) => continue,
                Err(e) => return Err(e),
            };
            for mut sub in subs {
                let mut addr = rec.address.clone();
                addr.extend_from_slice(&sub.address);
                sub.address = addr;
                sub.big_d = rec.big_d * sub.delta;
                next.push(sub);
            }
        }
        out.append(&mut frontier);
        frontier = next;
        let _ = level;
    }
    out.append(&mut frontier);
    Ok(out)
}

fn hash_address(addr: &Address) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &d in addr {
        h ^= d as u64 + 1;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// JSON-lines dump: one record per line.
pub fn write_records<W: Write>(records: &[DecompRecord], w: &mut W) -> io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut *w, rec)?;
        writeln!(w)?;
    }
    Ok(())
}
