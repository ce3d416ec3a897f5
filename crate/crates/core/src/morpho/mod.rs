//! SWC neuron morphology: parsing, canonical writing, resampling, and the
//! bidirectional nearest-node reconstruction metrics.
//!
//! SWC records are `id type x y z radius parent` in voxel coordinates;
//! `#` lines are comments. Parsed trees are kept in canonical ascending-id
//! order.

mod trace;

pub use trace::{trace, TraceError};

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SwcError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: duplicate node id {id}")]
    DuplicateId { line: usize, id: i64 },
    #[error("line {line}: node {id} references missing parent {parent}")]
    DanglingParent { line: usize, id: i64, parent: i64 },
    #[error("cycle through node {id}")]
    Cycle { id: i64 },
    #[error("tree has no nodes")]
    Empty,
    #[error("tree has no root (some parent chain never reaches -1)")]
    NoRoot,
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, SwcError>;

/// One SWC record. `x`, `y`, `z` and `radius` are in voxel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwcNode {
    pub id: i64,
    pub node_type: i32,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub radius: f64,
    pub parent: i64,
}

impl SwcNode {
    pub fn pos(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// A parsed neuron morphology. Invariants: unique ids, every parent exists
/// or is -1, no cycles, at least one root.
#[derive(Debug, Clone, PartialEq)]
pub struct SwcTree {
    nodes: Vec<SwcNode>,
}

impl SwcTree {
    /// Validates the invariants and canonicalizes to ascending-id order.
    pub fn new(mut nodes: Vec<SwcNode>) -> Result<Self> {
        Self::validate(&nodes, None)?;
        nodes.sort_by_key(|n| n.id);
        Ok(SwcTree { nodes })
    }

    fn validate(nodes: &[SwcNode], lines: Option<&[usize]>) -> Result<()> {
        if nodes.is_empty() {
            return Err(SwcError::Empty);
        }
        let line_of = |i: usize| lines.map_or(i + 1, |l| l[i]);
        let mut by_id: HashMap<i64, usize> = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if by_id.insert(n.id, i).is_some() {
                return Err(SwcError::DuplicateId {
                    line: line_of(i),
                    id: n.id,
                });
            }
        }
        let mut has_root = false;
        for (i, n) in nodes.iter().enumerate() {
            if n.parent == -1 {
                has_root = true;
            } else if !by_id.contains_key(&n.parent) {
                return Err(SwcError::DanglingParent {
                    line: line_of(i),
                    id: n.id,
                    parent: n.parent,
                });
            }
        }
        if !has_root {
            return Err(SwcError::NoRoot);
        }
        // Walk parent chains with memoized states to reject cycles.
        let mut state = vec![0u8; nodes.len()]; // 0 new, 1 on path, 2 done
        for start in 0..nodes.len() {
            let mut path = Vec::new();
            let mut cur = start;
            loop {
                match state[cur] {
                    2 => break,
                    1 => {
                        return Err(SwcError::Cycle {
                            id: nodes[cur].id,
                        })
                    }
                    _ => {}
                }
                state[cur] = 1;
                path.push(cur);
                if nodes[cur].parent == -1 {
                    break;
                }
                cur = by_id[&nodes[cur].parent];
            }
            for i in path {
                state[i] = 2;
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[SwcNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parses SWC text. Comment (`#`) and blank lines are skipped; every
    /// record needs exactly 7 whitespace-separated fields.
    pub fn parse(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut lines = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(SwcError::Parse {
                    line: line_no,
                    reason: format!("expected 7 fields, got {}", fields.len()),
                });
            }
            let parse_err = |what: &str, v: &str| SwcError::Parse {
                line: line_no,
                reason: format!("malformed {what} field {v:?}"),
            };
            let node = SwcNode {
                id: fields[0].parse().map_err(|_| parse_err("id", fields[0]))?,
                node_type: fields[1]
                    .parse()
                    .map_err(|_| parse_err("type", fields[1]))?,
                x: fields[2].parse().map_err(|_| parse_err("x", fields[2]))?,
                y: fields[3].parse().map_err(|_| parse_err("y", fields[3]))?,
                z: fields[4].parse().map_err(|_| parse_err("z", fields[4]))?,
                radius: fields[5]
                    .parse()
                    .map_err(|_| parse_err("radius", fields[5]))?,
                parent: fields[6]
                    .parse()
                    .map_err(|_| parse_err("parent", fields[6]))?,
            };
            for (what, v) in [("x", node.x), ("y", node.y), ("z", node.z), ("radius", node.radius)]
            {
                if !v.is_finite() {
                    return Err(SwcError::Parse {
                        line: line_no,
                        reason: format!("non-finite {what} value"),
                    });
                }
            }
            nodes.push(node);
            lines.push(line_no);
        }
        Self::validate(&nodes, Some(&lines))?;
        nodes.sort_by_key(|n| n.id);
        Ok(SwcTree { nodes })
    }

    /// Canonical SWC text: ascending id, single-space separated, floats in
    /// shortest round-trip form.
    pub fn to_swc(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                n.id, n.node_type, n.x, n.y, n.z, n.radius, n.parent
            ));
        }
        out
    }

    /// Total polyline length (sum of parent-child edge lengths).
    pub fn total_length(&self) -> f64 {
        let by_id: HashMap<i64, &SwcNode> = self.nodes.iter().map(|n| (n.id, n)).collect();
        self.nodes
            .iter()
            .filter(|n| n.parent != -1)
            .map(|n| {
                let p = by_id[&n.parent];
                dist3(n.pos(), p.pos())
            })
            .sum()
    }

    /// Subdivides every edge so consecutive node spacing is at most `step`,
    /// linearly interpolating radii. Node ids are renumbered from 1.
    pub fn resample(&self, step: f64) -> Result<SwcTree> {
        if step <= 0.0 || !step.is_finite() {
            return Err(SwcError::InvalidArgument(format!(
                "resample step must be positive, got {step}"
            )));
        }
        let index_of: HashMap<i64, usize> =
            self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        let mut roots = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.parent == -1 {
                roots.push(i);
            } else {
                children[index_of[&n.parent]].push(i);
            }
        }

        let mut out: Vec<SwcNode> = Vec::with_capacity(self.nodes.len());
        // (node index, new parent id) — explicit stack to survive deep paths.
        let mut stack: Vec<(usize, i64)> = Vec::new();
        for &r in roots.iter().rev() {
            stack.push((r, -1));
        }
        while let Some((i, parent_new_id)) = stack.pop() {
            let node = self.nodes[i];
            let mut prev_id = parent_new_id;
            if parent_new_id == -1 {
                let new_id = out.len() as i64 + 1;
                out.push(SwcNode {
                    id: new_id,
                    parent: -1,
                    ..node
                });
                prev_id = new_id;
            } else {
                let parent = out[(parent_new_id - 1) as usize];
                let length = dist3(node.pos(), parent.pos());
                let pieces = (length / step).ceil().max(1.0) as usize;
                for k in 1..=pieces {
                    let t = k as f64 / pieces as f64;
                    let new_id = out.len() as i64 + 1;
                    out.push(SwcNode {
                        id: new_id,
                        node_type: node.node_type,
                        x: parent.x + t * (node.x - parent.x),
                        y: parent.y + t * (node.y - parent.y),
                        z: parent.z + t * (node.z - parent.z),
                        radius: parent.radius + t * (node.radius - parent.radius),
                        parent: prev_id,
                    });
                    prev_id = new_id;
                }
            }
            for &c in children[i].iter().rev() {
                stack.push((c, prev_id));
            }
        }
        SwcTree::new(out)
    }

    /// Rigid translation, mainly for invariance tests.
    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> SwcTree {
        SwcTree {
            nodes: self
                .nodes
                .iter()
                .map(|n| SwcNode {
                    x: n.x + dx,
                    y: n.y + dy,
                    z: n.z + dz,
                    ..*n
                })
                .collect(),
        }
    }
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

// ── Reconstruction metrics ───────────────────────────────────────────

/// ESA / DSA / PDS between two morphologies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronDistance {
    /// Mean of all pooled bidirectional nearest-node distances.
    pub esa: f64,
    /// Mean over pooled distances above the threshold (0 if none).
    pub dsa: f64,
    /// Fraction of pooled distances above the threshold.
    pub pds: f64,
}

/// Default over/under threshold separating "different structure", in voxels.
pub const DISTANCE_THRESHOLD: f64 = 2.0;

/// Bidirectional nearest-node distance metrics. Both trees are resampled
/// to unit spacing first so the node sets are spacing-invariant.
pub fn neuron_distance(a: &SwcTree, b: &SwcTree, threshold: f64) -> Result<NeuronDistance> {
    if a.is_empty() || b.is_empty() {
        return Err(SwcError::Empty);
    }
    if threshold < 0.0 {
        return Err(SwcError::InvalidArgument(format!(
            "threshold must be non-negative, got {threshold}"
        )));
    }
    let ra = a.resample(1.0)?;
    let rb = b.resample(1.0)?;
    let pa: Vec<[f64; 3]> = ra.nodes().iter().map(SwcNode::pos).collect();
    let pb: Vec<[f64; 3]> = rb.nodes().iter().map(SwcNode::pos).collect();

    let mut pooled = nearest_distances(&pa, &pb);
    pooled.extend(nearest_distances(&pb, &pa));

    let total = pooled.len() as f64;
    let esa = pooled.iter().sum::<f64>() / total;
    let over: Vec<f64> = pooled.iter().copied().filter(|&d| d > threshold).collect();
    let (dsa, pds) = if over.is_empty() {
        (0.0, 0.0)
    } else {
        (
            over.iter().sum::<f64>() / over.len() as f64,
            over.len() as f64 / total,
        )
    };
    Ok(NeuronDistance { esa, dsa, pds })
}

/// For every query point, the Euclidean distance to the nearest target
/// point, via a uniform-grid spatial hash with ring expansion.
fn nearest_distances(queries: &[[f64; 3]], targets: &[[f64; 3]]) -> Vec<f64> {
    const CELL: f64 = 2.0;
    let key = |p: &[f64; 3]| {
        [
            (p[0] / CELL).floor() as i64,
            (p[1] / CELL).floor() as i64,
            (p[2] / CELL).floor() as i64,
        ]
    };
    let mut grid: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    for (i, p) in targets.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i as u32);
    }
    let max_ring = {
        // Upper bound on rings needed: grid diameter of the target cloud.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in targets.iter().chain(queries) {
            for ax in 0..3 {
                lo[ax] = lo[ax].min(p[ax]);
                hi[ax] = hi[ax].max(p[ax]);
            }
        }
        let span = (0..3).map(|ax| hi[ax] - lo[ax]).fold(0.0f64, f64::max);
        (span / CELL).ceil() as i64 + 2
    };

    queries
        .iter()
        .map(|q| {
            let c = key(q);
            let mut best = f64::INFINITY;
            for ring in 0..=max_ring {
                // Points in a ring-k cell are at least (k-1)·CELL away.
                if best.is_finite() && (ring - 1) as f64 * CELL > best {
                    break;
                }
                for dz in -ring..=ring {
                    for dy in -ring..=ring {
                        for dx in -ring..=ring {
                            if dz.abs().max(dy.abs()).max(dx.abs()) != ring {
                                continue;
                            }
                            if let Some(cell) =
                                grid.get(&[c[0] + dz, c[1] + dy, c[2] + dx])
                            {
                                for &i in cell {
                                    let d = dist3(*q, targets[i as usize]);
                                    best = best.min(d);
                                }
                            }
                        }
                    }
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_single_root() {
        let t = SwcTree::parse("1 1 0 0 0 1 -1\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.nodes()[0].parent, -1);
        assert_eq!(t.nodes()[0].radius, 1.0);
    }

    #[test]
    fn write_parse_roundtrip_is_canonical() {
        let text = "# a comment\n3 3 2.5 0 0 0.5 1\n1 1 0 0 0 1 -1\n2 3 1.25 0 0 0.75 1\n";
        let t = SwcTree::parse(text).unwrap();
        let canon = t.to_swc();
        assert_eq!(
            canon,
            "1 1 0 0 0 1 -1\n2 3 1.25 0 0 0.75 1\n3 3 2.5 0 0 0.5 1\n"
        );
        let back = SwcTree::parse(&canon).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn dangling_parent_names_line() {
        let text = "1 1 0 0 0 1 -1\n2 3 1 0 0 1 99\n";
        match SwcTree::parse(text) {
            Err(SwcError::DanglingParent { line, parent, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(parent, 99);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_and_cycle_are_rejected() {
        assert!(matches!(
            SwcTree::parse("1 1 0 0 0 1 -1\n1 1 1 0 0 1 1\n"),
            Err(SwcError::DuplicateId { line: 2, id: 1 })
        ));
        assert!(matches!(
            SwcTree::parse("1 1 0 0 0 1 2\n2 1 1 0 0 1 1\n"),
            Err(SwcError::NoRoot) | Err(SwcError::Cycle { .. })
        ));
        // A cycle alongside a valid root.
        assert!(matches!(
            SwcTree::parse("1 1 0 0 0 1 -1\n2 1 1 0 0 1 3\n3 1 2 0 0 1 2\n"),
            Err(SwcError::Cycle { .. })
        ));
    }

    #[test]
    fn malformed_field_names_line() {
        match SwcTree::parse("1 1 0 zero 0 1 -1\n") {
            Err(SwcError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resample_short_edge_unchanged() {
        let t = SwcTree::parse("1 1 0 0 0 1 -1\n2 1 1 0 0 1 1\n").unwrap();
        assert_eq!(t.resample(1.0).unwrap().len(), 2);
    }

    #[test]
    fn resample_length_four_inserts_three_interior_nodes() {
        let t = SwcTree::parse("1 1 0 0 0 1 -1\n2 1 4 0 0 3 1\n").unwrap();
        let r = t.resample(1.0).unwrap();
        assert_eq!(r.len(), 5);
        let xs: Vec<f64> = r.nodes().iter().map(|n| n.x).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        // Radii interpolate linearly from 1 to 3.
        let radii: Vec<f64> = r.nodes().iter().map(|n| n.radius).collect();
        assert_eq!(radii, vec![1.0, 1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn resample_preserves_total_length() {
        let t = SwcTree::parse(
            "1 1 0 0 0 1 -1\n2 1 3.7 1.1 0 1 1\n3 1 3.7 5.0 2.0 1 2\n4 1 -2 0 0 1 1\n",
        )
        .unwrap();
        let r = t.resample(0.37).unwrap();
        assert!((t.total_length() - r.total_length()).abs() <= 1e-9);
    }

    #[test]
    fn identical_trees_have_zero_distance() {
        let t = SwcTree::parse("1 1 0 0 0 1 -1\n2 1 9 0 0 1 1\n").unwrap();
        let d = neuron_distance(&t, &t, DISTANCE_THRESHOLD).unwrap();
        assert_eq!((d.esa, d.dsa, d.pds), (0.0, 0.0, 0.0));
    }

    #[test]
    fn parallel_segments_offset_by_one() {
        // Two parallel straight segments offset by 1 voxel: every nearest
        // distance is exactly 1 after unit resampling, none above 2.
        let a = SwcTree::parse("1 1 0 0 0 1 -1\n2 1 8 0 0 1 1\n").unwrap();
        let b = SwcTree::parse("1 1 0 1 0 1 -1\n2 1 8 1 0 1 1\n").unwrap();
        let d = neuron_distance(&a, &b, 2.0).unwrap();
        assert!((d.esa - 1.0).abs() <= 1e-12);
        assert_eq!(d.dsa, 0.0);
        assert_eq!(d.pds, 0.0);
    }

    #[test]
    fn distance_matches_all_pairs_oracle() {
        let mut seed = 77u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(13);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 20.0
        };
        for _ in 0..5 {
            let mk = |n: usize, next: &mut dyn FnMut() -> f64| {
                let mut nodes = vec![SwcNode {
                    id: 1,
                    node_type: 1,
                    x: next(),
                    y: next(),
                    z: next(),
                    radius: 1.0,
                    parent: -1,
                }];
                for i in 2..=n as i64 {
                    nodes.push(SwcNode {
                        id: i,
                        node_type: 3,
                        x: next(),
                        y: next(),
                        z: next(),
                        radius: 1.0,
                        parent: i - 1,
                    });
                }
                SwcTree::new(nodes).unwrap()
            };
            let a = mk(4, &mut next);
            let b = mk(5, &mut next);
            let got = neuron_distance(&a, &b, 2.0).unwrap();

            // Brute-force all-pairs oracle over the unit-resampled nodes.
            let ra = a.resample(1.0).unwrap();
            let rb = b.resample(1.0).unwrap();
            let mut pooled = Vec::new();
            for n in ra.nodes() {
                let d = rb
                    .nodes()
                    .iter()
                    .map(|m| dist3(n.pos(), m.pos()))
                    .fold(f64::INFINITY, f64::min);
                pooled.push(d);
            }
            for n in rb.nodes() {
                let d = ra
                    .nodes()
                    .iter()
                    .map(|m| dist3(n.pos(), m.pos()))
                    .fold(f64::INFINITY, f64::min);
                pooled.push(d);
            }
            let esa = pooled.iter().sum::<f64>() / pooled.len() as f64;
            assert!((got.esa - esa).abs() <= 1e-9);
            let over: Vec<f64> = pooled.iter().copied().filter(|&d| d > 2.0).collect();
            let dsa = if over.is_empty() {
                0.0
            } else {
                over.iter().sum::<f64>() / over.len() as f64
            };
            let pds = over.len() as f64 / pooled.len() as f64;
            assert!((got.dsa - dsa).abs() <= 1e-9);
            assert!((got.pds - pds).abs() <= 1e-9);
        }
    }

    #[test]
    fn distance_is_translation_invariant() {
        let a = SwcTree::parse("1 1 0 0 0 1 -1\n2 1 6 2 1 1 1\n3 1 9 5 1 1 2\n").unwrap();
        let b = SwcTree::parse("1 1 1 0 0 1 -1\n2 1 6 3 1 1 1\n").unwrap();
        let d1 = neuron_distance(&a, &b, 2.0).unwrap();
        let d2 = neuron_distance(
            &a.translated(10.0, -4.0, 3.0),
            &b.translated(10.0, -4.0, 3.0),
            2.0,
        )
        .unwrap();
        assert!((d1.esa - d2.esa).abs() <= 1e-9);
        assert!((d1.dsa - d2.dsa).abs() <= 1e-9);
        assert!((d1.pds - d2.pds).abs() <= 1e-9);
    }

    #[test]
    fn empty_tree_is_an_argument_error() {
        assert!(matches!(SwcTree::new(vec![]), Err(SwcError::Empty)));
    }
}
