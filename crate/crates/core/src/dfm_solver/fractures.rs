//! Fracture segments embedded in the matrix mesh: clipping, merging,
//! intersection detection and splitting into 1D elements.

use std::collections::HashMap;

use crate::frac_geom::Fracture;
use crate::geometry::{Crossing, Point2, Rect, Segment};

use super::mesh::MatrixMesh;

/// A fracture restricted to a rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClippedFracture {
    pub id: u64,
    pub segment: Segment,
    pub aperture: f64,
    pub conductivity: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClipStats {
    pub outside: usize,
    pub zero_length: usize,
    pub merged: usize,
}

/// Clip `fractures` to `rect`, drop degenerate pieces and merge collinear overlaps.
pub fn clip_fractures(fractures: &[Fracture], rect: &Rect, tol: f64) -> (Vec<ClippedFracture>, ClipStats) {
    let mut stats = ClipStats::default();
    let mut out = Vec::with_capacity(fractures.len());
    for f in fractures {
        match f.segment().clip(rect) {
            None => stats.outside += 1,
            Some(s) if s.length() <= tol => stats.zero_length += 1,
            Some(segment) => out.push(ClippedFracture {
                id: f.id,
                segment,
                aperture: f.aperture,
                conductivity: f.conductivity,
            }),
        }
    }
    stats.merged = merge_collinear(&mut out, tol);
    if stats.merged > 0 {
        log::warn!("merged {} overlapping collinear fracture pairs", stats.merged);
    }
    (out, stats)
}

fn merge_collinear(list: &mut Vec<ClippedFracture>, tol: f64) -> usize {
    let mut merged = 0;
    let mut i = 0;
    while i < list.len() {
        let mut j = i + 1;
        let mut changed = false;
        while j < list.len() {
            let si = list[i].segment;
            if let Some(Crossing::Overlap { .. }) = si.crossing(&list[j].segment, tol) {
                let sj = list[j].segment;
                let (dx, dy) = si.dir();
                let rr = dx * dx + dy * dy;
                let proj = |p: Point2| ((p.x - si.a.x) * dx + (p.y - si.a.y) * dy) / rr;
                let lo = 0.0_f64.min(proj(sj.a)).min(proj(sj.b));
                let hi = 1.0_f64.max(proj(sj.a)).max(proj(sj.b));
                let keep = if list[j].aperture > list[i].aperture { list[j] } else { list[i] };
                list[i] = ClippedFracture {
                    segment: Segment::new(si.at(lo), si.at(hi)),
                    ..keep
                };
                list.remove(j);
                merged += 1;
                changed = true;
            } else {
                j += 1;
            }
        }
        if !changed {
            i += 1;
        }
    }
    merged
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FractureElement {
    /// Fracture-node indices (local to the fracture mesh).
    pub nodes: [usize; 2],
    /// Index into `FractureMesh::fractures`.
    pub fracture: usize,
    pub length: f64,
    pub aperture: f64,
    pub conductivity: f64,
    /// Matrix element containing the midpoint.
    pub host: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FractureMesh {
    pub fractures: Vec<ClippedFracture>,
    pub nodes: Vec<Point2>,
    pub elements: Vec<FractureElement>,
    /// Number of fracture nodes shared by two or more fractures.
    pub junctions: usize,
    pub stats: ClipStats,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshingOptions {
    /// Snap tolerance relative to the domain size.
    pub snap_rel: f64,
    /// Target element length relative to the smaller cell side.
    pub target_len: f64,
    /// Minimum spacing between a cell-crossing split and any other split point.
    pub min_gap: f64,
}

impl Default for MeshingOptions {
    fn default() -> Self {
        Self { snap_rel: 1e-9, target_len: 0.75, min_gap: 0.05 }
    }
}

struct JunctionIndex {
    cell: f64,
    tol: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
    points: Vec<Point2>,
}

impl JunctionIndex {
    fn new(tol: f64) -> Self {
        Self { cell: 4.0 * tol.max(f64::MIN_POSITIVE), tol, buckets: HashMap::new(), points: Vec::new() }
    }

    fn key(&self, p: Point2) -> (i64, i64) {
        ((p.x / self.cell).floor() as i64, (p.y / self.cell).floor() as i64)
    }

    fn find_or_add(&mut self, p: Point2) -> usize {
        let (kx, ky) = self.key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(ids) = self.buckets.get(&(kx + dx, ky + dy)) {
                    for &id in ids {
                        if self.points[id].dist(p) <= self.tol {
                            return id;
                        }
                    }
                }
            }
        }
        let id = self.points.len();
        self.points.push(p);
        self.buckets.entry((kx, ky)).or_default().push(id);
        id
    }
}

/// Parameters `t` in (0, 1) where `s` crosses interior grid lines of `mesh`
/// (vertical, horizontal and the rising cell diagonals).
fn grid_crossings(s: &Segment, mesh: &MatrixMesh, out: &mut Vec<f64>) {
    let r = mesh.rect;
    let ua = (s.a.x - r.x0) / mesh.dx;
    let ub = (s.b.x - r.x0) / mesh.dx;
    let va = (s.a.y - r.y0) / mesh.dy;
    let vb = (s.b.y - r.y0) / mesh.dy;
    let mut family = |a: f64, b: f64, lo: i64, hi: i64| {
        let d = b - a;
        if d == 0.0 {
            return;
        }
        let k0 = (a.min(b).floor() as i64).max(lo);
        let k1 = (a.max(b).ceil() as i64).min(hi);
        for k in k0..=k1 {
            let t = (k as f64 - a) / d;
            if t > 0.0 && t < 1.0 {
                out.push(t);
            }
        }
    };
    family(ua, ub, 1, mesh.nx as i64 - 1);
    family(va, vb, 1, mesh.ny as i64 - 1);
    family(ua - va, ub - vb, -(mesh.ny as i64) + 1, mesh.nx as i64 - 1);
}

#[derive(Clone, Copy)]
struct Mark {
    t: f64,
    junction: Option<usize>,
}

impl FractureMesh {
    pub fn build(fractures: &[Fracture], mesh: &MatrixMesh, opts: &MeshingOptions) -> Self {
        let rect = mesh.rect;
        let tol = opts.snap_rel * rect.size();
        let (clipped, stats) = clip_fractures(fractures, &rect, tol);
        let h = mesh.dx.min(mesh.dy);
        let target = opts.target_len * h;
        let min_gap = opts.min_gap * h;

        let mut junctions = JunctionIndex::new(tol);
        let mut marks: Vec<Vec<Mark>> = clipped
            .iter()
            .map(|_| vec![Mark { t: 0.0, junction: None }, Mark { t: 1.0, junction: None }])
            .collect();
        for i in 0..clipped.len() {
            for j in i + 1..clipped.len() {
                if let Some(Crossing::Point { t, u, at }) = clipped[i].segment.crossing(&clipped[j].segment, tol) {
                    let jid = junctions.find_or_add(at);
                    marks[i].push(Mark { t, junction: Some(jid) });
                    marks[j].push(Mark { t: u, junction: Some(jid) });
                }
            }
        }

        let mut junction_node: Vec<Option<usize>> = vec![None; junctions.points.len()];
        let mut nodes: Vec<Point2> = Vec::new();
        let mut elements = Vec::new();
        let mut soft = Vec::new();
        for (fi, f) in clipped.iter().enumerate() {
            let seg = f.segment;
            let len = seg.length();
            let m = &mut marks[fi];
            m.sort_by(|a, b| a.t.total_cmp(&b.t));
            // collapse coincident marks, keeping any junction reference
            let mut hard: Vec<Mark> = Vec::with_capacity(m.len());
            for &mk in m.iter() {
                match hard.last_mut() {
                    Some(last) if (mk.t - last.t) * len <= tol => {
                        if last.junction.is_none() {
                            last.junction = mk.junction;
                        }
                        if mk.t == 1.0 || mk.t == 0.0 {
                            last.t = mk.t;
                        }
                    }
                    _ => hard.push(mk),
                }
            }

            soft.clear();
            grid_crossings(&seg, mesh, &mut soft);
            soft.sort_by(|a, b| a.total_cmp(b));
            let mut points: Vec<Mark> = Vec::with_capacity(hard.len() + soft.len());
            let mut hi = 0;
            for &t in &soft {
                while hi < hard.len() && hard[hi].t <= t {
                    points.push(hard[hi]);
                    hi += 1;
                }
                let prev_ok = points.last().is_none_or(|p| (t - p.t) * len >= min_gap);
                let next_ok = hard.get(hi).is_none_or(|p| (p.t - t) * len >= min_gap);
                if prev_ok && next_ok {
                    points.push(Mark { t, junction: None });
                }
            }
            points.extend_from_slice(&hard[hi..]);

            let mut node_at = |mk: &Mark, nodes: &mut Vec<Point2>| -> usize {
                if let Some(j) = mk.junction {
                    *junction_node[j].get_or_insert_with(|| {
                        nodes.push(junctions.points[j]);
                        nodes.len() - 1
                    })
                } else {
                    nodes.push(seg.at(mk.t));
                    nodes.len() - 1
                }
            };
            let mut prev = node_at(&points[0], &mut nodes);
            for w in points.windows(2) {
                let (t0, t1) = (w[0].t, w[1].t);
                let pieces = (((t1 - t0) * len / target).ceil() as usize).max(1);
                for k in 1..=pieces {
                    let next = if k == pieces {
                        node_at(&w[1], &mut nodes)
                    } else {
                        nodes.push(seg.at(t0 + (t1 - t0) * k as f64 / pieces as f64));
                        nodes.len() - 1
                    };
                    let (pa, pb) = (nodes[prev], nodes[next]);
                    let length = pa.dist(pb);
                    if length > 0.0 {
                        elements.push(FractureElement {
                            nodes: [prev, next],
                            fracture: fi,
                            length,
                            aperture: f.aperture,
                            conductivity: f.conductivity,
                            host: mesh.locate(pa.lerp(pb, 0.5)),
                        });
                    }
                    prev = next;
                }
            }
        }

        let mut degree = vec![0usize; nodes.len()];
        let mut last_fracture = vec![usize::MAX; nodes.len()];
        for e in &elements {
            for &n in &e.nodes {
                if last_fracture[n] != e.fracture {
                    last_fracture[n] = e.fracture;
                    degree[n] += 1;
                }
            }
        }
        let shared = degree.iter().filter(|&&d| d > 1).count();
        if stats.zero_length > 0 {
            log::debug!("dropped {} zero-length fractures after clipping", stats.zero_length);
        }
        Self { fractures: clipped, nodes, elements, junctions: shared, stats }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}
