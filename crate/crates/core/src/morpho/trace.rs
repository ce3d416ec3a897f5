//! Skeleton tracer: probability volume → binary mask → topology-preserving
//! thinning → spanning tree over skeleton voxels → pruned SWC morphology.
//!
//! A plumbing-grade stand-in for a production tracing pipeline: good enough
//! to close the segmentation → morphology loop on phantom data.

use thiserror::Error;

use super::{SwcError, SwcNode, SwcTree};
use crate::data::Volume;
use crate::edt::squared_edt_3d;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("no foreground voxels after binarizing at {threshold}")]
    EmptyForeground { threshold: f64 },
    #[error("probability volume has values outside [0, 1]")]
    BadProbabilities,
    #[error(transparent)]
    Swc(#[from] SwcError),
}

/// Traces a probability volume into an SWC tree.
///
/// Pipeline: binarize at `binarize` → 26-connected skeleton by iterative
/// simple-point thinning → spanning tree rooted at the largest-radius voxel
/// → leaf branches shorter than `prune_len` removed → radii from the
/// distance transform. Only the root's connected component is traced.
pub fn trace(prob: &Volume, binarize: f64, prune_len: f64) -> Result<SwcTree, TraceError> {
    let (d, h, w) = prob.shape;
    if prob.voxels.iter().any(|&v| !(0.0..=1.0).contains(&(v as f64))) {
        return Err(TraceError::BadProbabilities);
    }
    let mask: Vec<bool> = prob.voxels.iter().map(|&v| v as f64 >= binarize).collect();
    if !mask.iter().any(|&m| m) {
        return Err(TraceError::EmptyForeground {
            threshold: binarize,
        });
    }

    // Radii: distance to the background, computed before thinning.
    let background: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let radius2 = squared_edt_3d((d, h, w), &background);

    let mut skel = mask;
    thin(&mut skel, (d, h, w));

    // Root at the largest-radius skeleton voxel (first index on ties).
    let root = skel
        .iter()
        .enumerate()
        .filter(|&(_, &m)| m)
        .max_by(|a, b| {
            radius2[a.0]
                .partial_cmp(&radius2[b.0])
                .unwrap()
                .then(b.0.cmp(&a.0))
        })
        .map(|(i, _)| i)
        .expect("foreground survives thinning");

    let parent = spanning_tree(&skel, (d, h, w), root);
    let kept = prune(&parent, (d, h, w), root, prune_len);

    // Emit SWC: breadth-first from the root in deterministic index order.
    let mut nodes = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    let mut children: std::collections::HashMap<usize, Vec<usize>> =
        std::collections::HashMap::new();
    for &v in &kept {
        if v != root {
            children.entry(parent[v] as usize).or_default().push(v);
        }
    }
    for c in children.values_mut() {
        c.sort_unstable();
    }
    queue.push_back((root, -1i64));
    while let Some((v, parent_id)) = queue.pop_front() {
        let id = nodes.len() as i64 + 1;
        let (z, y, x) = (v / (h * w), (v / w) % h, v % w);
        nodes.push(SwcNode {
            id,
            node_type: if parent_id == -1 { 1 } else { 3 },
            x: x as f64,
            y: y as f64,
            z: z as f64,
            radius: radius2[v].sqrt().max(0.5),
            parent: parent_id,
        });
        if let Some(cs) = children.get(&v) {
            for &c in cs {
                queue.push_back((c, id));
            }
        }
    }
    Ok(SwcTree::new(nodes)?)
}

// ── Thinning ─────────────────────────────────────────────────────────

const FACE_DIRS: [[isize; 3]; 6] = [
    [0, 0, 1],
    [0, 0, -1],
    [0, 1, 0],
    [0, -1, 0],
    [1, 0, 0],
    [-1, 0, 0],
];

/// Iterative boundary thinning with six directional subiterations.
/// Deletes only simple points (topology preserved) that are not endpoints
/// (branch tips preserved), until a full pass removes nothing.
fn thin(mask: &mut [bool], shape: (usize, usize, usize)) {
    let (d, h, w) = shape;
    let at = |mask: &[bool], z: isize, y: isize, x: isize| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && mask[(z as usize * h + y as usize) * w + x as usize]
    };
    loop {
        let mut deleted = 0usize;
        for dir in FACE_DIRS {
            // Candidates: border voxels in this direction.
            let mut candidates = Vec::new();
            for z in 0..d as isize {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        if at(mask, z, y, x)
                            && !at(mask, z + dir[0], y + dir[1], x + dir[2])
                        {
                            candidates.push((z, y, x));
                        }
                    }
                }
            }
            // Sequential deletion with re-check keeps every removal simple.
            for (z, y, x) in candidates {
                let nb = neighborhood(mask, shape, z, y, x);
                if is_endpoint(&nb) || !is_simple(&nb) {
                    continue;
                }
                mask[(z as usize * h + y as usize) * w + x as usize] = false;
                deleted += 1;
            }
        }
        if deleted == 0 {
            break;
        }
    }
}

/// 3×3×3 foreground snapshot around the center (out of bounds = background).
fn neighborhood(
    mask: &[bool],
    (d, h, w): (usize, usize, usize),
    z: isize,
    y: isize,
    x: isize,
) -> [bool; 27] {
    let mut nb = [false; 27];
    let mut i = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (zz, yy, xx) = (z + dz, y + dy, x + dx);
                nb[i] = zz >= 0
                    && yy >= 0
                    && xx >= 0
                    && (zz as usize) < d
                    && (yy as usize) < h
                    && (xx as usize) < w
                    && mask[(zz as usize * h + yy as usize) * w + xx as usize];
                i += 1;
            }
        }
    }
    nb
}

fn idx27(dz: isize, dy: isize, dx: isize) -> usize {
    ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize
}

fn is_endpoint(nb: &[bool; 27]) -> bool {
    let count = nb.iter().filter(|&&v| v).count() - 1; // exclude the center
    count <= 1
}

/// Simple-point test: exactly one 26-connected foreground component in the
/// 26-neighborhood, and exactly one 6-connected background component in the
/// 18-neighborhood touching a face neighbor.
fn is_simple(nb: &[bool; 27]) -> bool {
    foreground_components_26(nb) == 1 && background_components_6(nb) == 1
}

fn foreground_components_26(nb: &[bool; 27]) -> usize {
    let mut seen = [false; 27];
    let mut comps = 0;
    for start in 0..27 {
        if start == 13 || !nb[start] || seen[start] {
            continue;
        }
        comps += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (z, y, x) = ((i / 9) as isize - 1, ((i / 3) % 3) as isize - 1, (i % 3) as isize - 1);
            for dz in -1..=1isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        if dz == 0 && dy == 0 && dx == 0 {
                            continue;
                        }
                        let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                        if nz.abs() > 1 || ny.abs() > 1 || nx.abs() > 1 {
                            continue;
                        }
                        let j = idx27(nz, ny, nx);
                        if j == 13 || !nb[j] || seen[j] {
                            continue;
                        }
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    comps
}

fn background_components_6(nb: &[bool; 27]) -> usize {
    // Cells of the 18-neighborhood: |dz|+|dy|+|dx| ∈ {1, 2}.
    let in_n18 = |dz: isize, dy: isize, dx: isize| (dz.abs() + dy.abs() + dx.abs()) <= 2;
    let mut seen = [false; 27];
    let mut comps = 0;
    for (fz, fy, fx) in [
        (0, 0, 1),
        (0, 0, -1),
        (0, 1, 0),
        (0, -1, 0),
        (1, 0, 0),
        (-1, 0, 0),
    ] {
        let start = idx27(fz, fy, fx);
        if nb[start] || seen[start] {
            continue;
        }
        comps += 1;
        let mut stack = vec![(fz, fy, fx)];
        seen[start] = true;
        while let Some((z, y, x)) = stack.pop() {
            for (dz, dy, dx) in [
                (0, 0, 1),
                (0, 0, -1),
                (0, 1, 0),
                (0, -1, 0),
                (1, 0, 0),
                (-1, 0, 0),
            ] {
                let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                if nz.abs() > 1 || ny.abs() > 1 || nx.abs() > 1 {
                    continue;
                }
                if (nz, ny, nx) == (0, 0, 0) || !in_n18(nz, ny, nx) {
                    continue;
                }
                let j = idx27(nz, ny, nx);
                if nb[j] || seen[j] {
                    continue;
                }
                seen[j] = true;
                stack.push((nz, ny, nx));
            }
        }
    }
    comps
}

// ── Spanning tree and pruning ────────────────────────────────────────

/// Prim spanning tree over 26-adjacent skeleton voxels, rooted at `root`;
/// edge preference is (fewer axes changed, lower voxel index), which keeps
/// the result independent of traversal incidentals. Returns the parent
/// array (`usize::MAX` marks unreached voxels, root is its own parent).
fn spanning_tree(skel: &[bool], (d, h, w): (usize, usize, usize), root: usize) -> Vec<usize> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    let mut parent = vec![usize::MAX; d * h * w];
    let mut heap: BinaryHeap<Reverse<(u8, usize, usize)>> = BinaryHeap::new();
    parent[root] = root;
    heap.push(Reverse((0, root, root)));
    let mut in_tree = vec![false; d * h * w];
    while let Some(Reverse((_, v, from))) = heap.pop() {
        if in_tree[v] {
            continue;
        }
        in_tree[v] = true;
        parent[v] = from;
        let (z, y, x) = ((v / (h * w)) as isize, ((v / w) % h) as isize, (v % w) as isize);
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dz == 0 && dy == 0 && dx == 0 {
                        continue;
                    }
                    let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                    if nz < 0
                        || ny < 0
                        || nx < 0
                        || nz >= d as isize
                        || ny >= h as isize
                        || nx >= w as isize
                    {
                        continue;
                    }
                    let u = (nz as usize * h + ny as usize) * w + nx as usize;
                    if !skel[u] || in_tree[u] {
                        continue;
                    }
                    let cost = (dz.abs() + dy.abs() + dx.abs()) as u8;
                    heap.push(Reverse((cost, u, v)));
                }
            }
        }
    }
    parent
}

/// Removes leaf branches whose arc length to the nearest junction is below
/// `prune_len`. Branches ending at the root are kept. Returns the surviving
/// voxel indices in ascending order.
fn prune(
    parent: &[usize],
    (_, h, w): (usize, usize, usize),
    root: usize,
    prune_len: f64,
) -> Vec<usize> {
    let pos = |v: usize| {
        [
            (v / (h * w)) as f64,
            ((v / w) % h) as f64,
            (v % w) as f64,
        ]
    };
    let mut alive: Vec<usize> = (0..parent.len())
        .filter(|&v| parent[v] != usize::MAX)
        .collect();
    loop {
        let alive_set: std::collections::HashSet<usize> = alive.iter().copied().collect();
        let mut child_count: std::collections::HashMap<usize, usize> =
            std::collections::HashMap::new();
        for &v in &alive {
            if v != root {
                *child_count.entry(parent[v]).or_insert(0) += 1;
            }
        }
        let mut removed: std::collections::HashSet<usize> = std::collections::HashSet::new();
        for &v in &alive {
            if v == root || child_count.get(&v).copied().unwrap_or(0) > 0 {
                continue; // not a leaf
            }
            // Walk towards the root until a junction.
            let mut path = vec![v];
            let mut length = 0.0;
            let mut cur = v;
            let ended_at_junction = loop {
                let p = parent[cur];
                if p == cur || !alive_set.contains(&p) {
                    break false; // reached root (or a detached stub)
                }
                let a = pos(cur);
                let b = pos(p);
                length += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                    .sqrt();
                if child_count.get(&p).copied().unwrap_or(0) >= 2 || p == root {
                    break p != root || child_count.get(&p).copied().unwrap_or(0) >= 2;
                }
                path.push(p);
                cur = p;
            };
            if ended_at_junction && length < prune_len {
                removed.extend(path);
            }
        }
        if removed.is_empty() {
            break;
        }
        alive.retain(|v| !removed.contains(v));
    }
    alive.sort_unstable();
    alive
}
