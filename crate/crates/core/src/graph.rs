//! Lip-region landmark graph and the landmark (P-ASR) encoder.
//!
//! The 117 nodes are the jaw line, a perioral ring, and the outer and inner
//! lip contours of a unit-square template. Edges are the contour chains
//! plus k-nearest neighbours on the template positions; the encoder runs
//! six spatial-temporal graph convolution blocks over that graph.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;

use crate::nn::{sinusoidal_positions, Bound, EncoderBlock, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{SparseAdjacency, Tape, Tensor, TensorError, Var};

pub const NODE_COUNT: usize = 117;

const TEMPLATE_V1: &str = include_str!("../data/lip_template_v1.txt");

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("landmark positions are degenerate (all points coincide)")]
    DegeneratePositions,
    #[error("landmark positions must be finite")]
    NonFinitePositions,
    #[error("neighbour count must be at least 1")]
    InvalidNeighborCount,
    #[error("landmark clip has no frames")]
    EmptyClip,
    #[error("invalid landmark clip: {0}")]
    InvalidClip(String),
    #[error("template line {line}: {msg}")]
    Template { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A run of consecutive node indices forming one outline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Contour {
    pub start: usize,
    pub len: usize,
    pub closed: bool,
}

/// Outlines of the canonical template: jaw, perioral ring, outer lip,
/// inner lip.
pub const CANONICAL_CONTOURS: [Contour; 4] = [
    Contour { start: 0, len: 25, closed: false },
    Contour { start: 25, len: 20, closed: true },
    Contour { start: 45, len: 40, closed: true },
    Contour { start: 85, len: 32, closed: true },
];

pub const JAW: Contour = CANONICAL_CONTOURS[0];
pub const PERIORAL: Contour = CANONICAL_CONTOURS[1];
pub const OUTER_LIP: Contour = CANONICAL_CONTOURS[2];
pub const INNER_LIP: Contour = CANONICAL_CONTOURS[3];

impl Contour {
    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }

    fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = if self.closed { self.len } else { self.len - 1 };
        (0..n).map(move |i| (self.start + i, self.start + (i + 1) % self.len))
    }
}

/// Mean landmark positions, `[N, 2]` in unit-square coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LipTemplate {
    positions: Tensor,
}

impl LipTemplate {
    /// The versioned template shipped with the crate.
    pub fn canonical() -> Self {
        Self::parse(TEMPLATE_V1).expect("bundled template is valid")
    }

    /// Parses `index x y` lines; `#` starts a comment. Indices must run
    /// `0..N` in order and coordinates must lie in `[0, 1]`.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut data = Vec::new();
        let mut expected = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| GraphError::Template {
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(err("expected `index x y`"));
            }
            let idx: usize = fields[0].parse().map_err(|_| err("bad index"))?;
            if idx != expected {
                return Err(err(&format!("expected index {expected}, got {idx}")));
            }
            for f in &fields[1..] {
                let v: f64 = f.parse().map_err(|_| err("bad coordinate"))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(err("coordinate outside [0, 1]"));
                }
                data.push(v);
            }
            expected += 1;
        }
        if expected == 0 {
            return Err(GraphError::Template {
                line: 0,
                msg: "no landmarks".into(),
            });
        }
        Ok(Self {
            positions: Tensor::new(&[expected, 2], data)?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# index x y\n");
        for i in 0..self.len() {
            let p = self.point(i);
            s.push_str(&format!("{i} {:.6} {:.6}\n", p[0], p[1]));
        }
        s
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        let r = self.positions.row(i);
        [r[0], r[1]]
    }
}

/// Undirected landmark graph with its normalized adjacency.
#[derive(Clone, Debug)]
pub struct LipGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Tensor,
    sparse: Arc<SparseAdjacency>,
}

impl LipGraph {
    /// Canonical 117-node graph: template contours plus `k` nearest
    /// neighbours.
    pub fn canonical(k: usize) -> Result<Self, GraphError> {
        build_lip_adjacency(LipTemplate::canonical().positions(), &CANONICAL_CONTOURS, k)
    }

    /// Graph with only self-loops (`Â = I`).
    pub fn identity(node_count: usize) -> Self {
        Self::from_edges(node_count, Vec::new())
    }

    pub fn from_edges(node_count: usize, edges: Vec<(usize, usize)>) -> Self {
        let adjacency = normalize_adjacency(node_count, &edges);
        let sparse = Arc::new(SparseAdjacency::from_dense(node_count, adjacency.data()));
        Self {
            node_count,
            edges,
            adjacency,
            sparse,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn sparse(&self) -> &Arc<SparseAdjacency> {
        &self.sparse
    }

    pub fn is_connected(&self) -> bool {
        let mut uf = UnionFind::new(self.node_count);
        for &(a, b) in &self.edges {
            uf.union(a, b);
        }
        let root = uf.find(0);
        (0..self.node_count).all(|i| uf.find(i) == root)
    }

    /// Same graph with node `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let edges = self.edges.iter().map(|&(a, b)| ordered(perm[a], perm[b])).collect::<BTreeSet<_>>();
        Self::from_edges(self.node_count, edges.into_iter().collect())
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Contour chains ∪ k-nearest-neighbour edges on `positions [N, 2]`,
/// symmetrized; if the result is disconnected, the closest cross-component
/// pair is joined until a single component remains. Distance ties are
/// broken by the lower node index.
pub fn build_lip_adjacency(positions: &Tensor, contours: &[Contour], k: usize) -> Result<LipGraph, GraphError> {
    if k == 0 {
        return Err(GraphError::InvalidNeighborCount);
    }
    let &[n, 2] = positions.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "build_lip_adjacency",
            detail: format!("positions must be [N, 2], got {:?}", positions.shape()),
        }
        .into());
    };
    if !positions.all_finite() {
        return Err(GraphError::NonFinitePositions);
    }
    let p = |i: usize| positions.row(i);
    let dist2 = |a: usize, b: usize| {
        let (pa, pb) = (p(a), p(b));
        (pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)
    };
    if n > 1 && (1..n).all(|i| dist2(0, i) == 0.0) {
        return Err(GraphError::DegeneratePositions);
    }

    let mut edges = BTreeSet::new();
    for c in contours {
        for (a, b) in c.edges() {
            if a != b && a < n && b < n {
                edges.insert(ordered(a, b));
            }
        }
    }
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| dist2(i, a).total_cmp(&dist2(i, b)).then(a.cmp(&b)));
        for &j in others.iter().take(k) {
            edges.insert(ordered(i, j));
        }
    }

    loop {
        let mut uf = UnionFind::new(n);
        for &(a, b) in &edges {
            uf.union(a, b);
        }
        let root = uf.find(0);
        let outside: Vec<usize> = (0..n).filter(|&i| uf.find(i) != root).collect();
        if outside.is_empty() {
            break;
        }
        let inside: Vec<usize> = (0..n).filter(|&i| uf.find(i) == root).collect();
        let mut best = (f64::INFINITY, 0, 0);
        for &a in &inside {
            for &b in &outside {
                let d = dist2(a, b);
                if d < best.0 {
                    best = (d, a, b);
                }
            }
        }
        edges.insert(ordered(best.1, best.2));
    }

    Ok(LipGraph::from_edges(n, edges.into_iter().collect()))
}

/// `D^(-1/2) (A + I) D^(-1/2)` for binary symmetric `A` built from
/// `edges`, where `D` is the degree matrix of `A + I`.
pub fn normalize_adjacency(node_count: usize, edges: &[(usize, usize)]) -> Tensor {
    let n = node_count;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(x, y) in edges {
        a[x * n + y] = 1.0;
        a[y * n + x] = 1.0;
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Tensor::new(&[n, n], a).expect("square adjacency")
}

/// Per-frame lip landmarks. Frames whose detection failed are stored as
/// exact zeros and flagged invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkClip {
    frames: Tensor,
    valid: Vec<bool>,
}

impl LandmarkClip {
    /// `frames [T, N, 2]`; every invalid frame must be all-zero.
    pub fn new(frames: Tensor, valid: Vec<bool>) -> Result<Self, GraphError> {
        let &[t, _, 2] = frames.shape() else {
            return Err(GraphError::InvalidClip(format!("frames must be [T, N, 2], got {:?}", frames.shape())));
        };
        if valid.len() != t {
            return Err(GraphError::InvalidClip(format!("{} validity flags for {t} frames", valid.len())));
        }
        let per = frames.len() / t;
        for (i, ok) in valid.iter().enumerate() {
            if !ok && frames.data()[i * per..(i + 1) * per].iter().any(|&v| v != 0.0) {
                return Err(GraphError::InvalidClip(format!("invalid frame {i} is not zero-padded")));
            }
        }
        Ok(Self { frames, valid })
    }

    /// Builds a clip from rows of `2N` interleaved coordinates; an all-zero
    /// row marks a missing detection.
    pub fn from_rows(rows: &[Vec<f64>], nodes: usize) -> Result<Self, GraphError> {
        if rows.is_empty() {
            return Err(GraphError::EmptyClip);
        }
        let mut data = Vec::with_capacity(rows.len() * nodes * 2);
        let mut valid = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != nodes * 2 {
                return Err(GraphError::InvalidClip(format!("row {i} has {} values, expected {}", r.len(), nodes * 2)));
            }
            valid.push(r.iter().any(|&v| v != 0.0));
            data.extend_from_slice(r);
        }
        Self::new(Tensor::new(&[rows.len(), nodes, 2], data)?, valid)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame_row(&self, t: usize) -> &[f64] {
        let per = self.nodes() * 2;
        &self.frames.data()[t * per..(t + 1) * per]
    }

    /// Clip with every listed frame replaced by zero padding.
    pub fn with_dropped(&self, dropped: &[usize]) -> Self {
        let mut out = self.clone();
        let per = self.nodes() * 2;
        for &t in dropped {
            out.frames.data_mut()[t * per..(t + 1) * per].iter_mut().for_each(|v| *v = 0.0);
            out.valid[t] = false;
        }
        out
    }
}

/// Scale of landmark deviations from the canonical template.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LandmarkStats {
    pub scale: f64,
}

impl Default for LandmarkStats {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl LandmarkStats {
    /// Root-mean-square offset from `template` over every valid frame.
    pub fn from_clips<'a>(template: &LipTemplate, clips: impl IntoIterator<Item = &'a LandmarkClip>) -> Self {
        let centre = template.positions().data();
        let (mut n, mut sq) = (0usize, 0.0);
        for c in clips {
            for t in (0..c.len()).filter(|&t| c.valid()[t]) {
                for (v, m) in c.frame_row(t).iter().zip(centre) {
                    n += 1;
                    sq += (v - m) * (v - m);
                }
            }
        }
        let scale = if n > 0 { (sq / n as f64).sqrt() } else { 0.0 };
        Self {
            scale: if scale > 1e-12 { scale } else { 1.0 },
        }
    }
}

impl LandmarkClip {
    /// `(x - template) / scale` on valid frames; invalid frames stay zero.
    pub fn normalized(&self, template: &LipTemplate, stats: LandmarkStats) -> Tensor {
        let centre = template.positions().data();
        let per = centre.len();
        assert_eq!(per, self.frames.len() / self.len().max(1), "template and clip node counts differ");
        let mut out = self.frames.clone();
        for (t, row) in out.data_mut().chunks_mut(per).enumerate() {
            if self.valid[t] {
                for (v, m) in row.iter_mut().zip(centre) {
                    *v = (*v - m) / stats.scale;
                }
            }
        }
        out
    }
}

/// One spatial-temporal graph convolution block: `Â·x·W + b` per frame,
/// depthwise temporal convolution per node ("same" padding), Mish, and a
/// residual connection when input and output widths agree.
#[derive(Clone, Debug)]
pub struct StgcnBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub temporal: ParamId,
    pub temporal_bias: ParamId,
    pub residual: bool,
}

impl StgcnBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        temporal_kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(temporal_kernel % 2 == 1, "temporal kernel must be odd");
        let bound = (6.0 / (cin + cout) as f64).sqrt();
        // start near an identity impulse in time
        let mut temporal = Tensor::uniform(&[temporal_kernel, cout], 0.1, rng);
        let centre = temporal_kernel / 2;
        temporal.data_mut()[centre * cout..(centre + 1) * cout].iter_mut().for_each(|v| *v += 1.0);
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::uniform(&[cin, cout], bound, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            temporal: store.add(format!("{name}.temporal"), temporal),
            temporal_bias: store.add(format!("{name}.temporal_bias"), Tensor::zeros(&[cout])),
            residual: cin == cout,
        }
    }

    /// `x [T, N, Cin] -> [T, N, Cout]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, graph: &LipGraph) -> Result<Var, TensorError> {
        let &[t, n, cin] = tape.shape(x) else {
            return Err(TensorError::ShapeMismatch {
                op: "stgcn_block",
                detail: format!("expected [T, N, C], got {:?}", tape.shape(x)),
            });
        };
        let w = p.get(self.weight);
        let cout = tape.shape(w)[1];
        if tape.shape(w)[0] != cin || n != graph.node_count() {
            return Err(TensorError::ShapeMismatch {
                op: "stgcn_block",
                detail: format!("input {:?} vs weight {:?} on {} nodes", tape.shape(x), tape.shape(w), graph.node_count()),
            });
        }
        // mix over the graph on whichever side has fewer channels
        let y = if cin <= cout {
            let m = tape.graph_mix(x, graph.sparse())?;
            let m = tape.reshape(m, &[t * n, cin])?;
            let y = tape.matmul(m, w)?;
            tape.reshape(y, &[t, n, cout])?
        } else {
            let m = tape.reshape(x, &[t * n, cin])?;
            let y = tape.matmul(m, w)?;
            let y = tape.reshape(y, &[t, n, cout])?;
            tape.graph_mix(y, graph.sparse())?
        };
        let y = tape.add_bias(y, p.get(self.bias))?;
        let y = tape.temporal_conv(y, p.get(self.temporal))?;
        let y = tape.add_bias(y, p.get(self.temporal_bias))?;
        let y = tape.mish(y);
        if self.residual {
            tape.add(y, x)
        } else {
            Ok(y)
        }
    }
}

/// Sizes of the landmark encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct PasrDims {
    pub gcn_channels: usize,
    pub gcn_blocks: usize,
    pub temporal_kernel: usize,
    pub d_enc: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub encoder_layers: usize,
    pub conv_width: Option<usize>,
}

/// Landmark encoder: ST-GCN stack, mean pool over nodes, linear + Mish to
/// the feature width, then self-attention encoder blocks.
#[derive(Clone, Debug)]
pub struct PasrEncoder {
    pub blocks: Vec<StgcnBlock>,
    pub project: Linear,
    pub encoder: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl PasrEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &PasrDims, rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(dims.gcn_blocks);
        let mut cin = 2;
        for i in 0..dims.gcn_blocks {
            blocks.push(StgcnBlock::new(
                store,
                &format!("{name}.stgcn{i}"),
                cin,
                dims.gcn_channels,
                dims.temporal_kernel,
                rng,
            ));
            cin = dims.gcn_channels;
        }
        let project = Linear::new(store, &format!("{name}.project"), cin, dims.d_enc, rng);
        let encoder = (0..dims.encoder_layers)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("{name}.enc{i}"),
                    dims.d_enc,
                    dims.heads,
                    dims.ff_hidden,
                    dims.conv_width,
                    rng,
                )
            })
            .collect();
        let norm = LayerNorm::new(store, &format!("{name}.norm"), dims.d_enc);
        Self {
            blocks,
            project,
            encoder,
            norm,
        }
    }

    /// `landmarks [T, N, 2] -> [T, d_enc]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, landmarks: Var, graph: &LipGraph) -> Result<Var, TensorError> {
        let mut x = landmarks;
        for b in &self.blocks {
            x = b.forward(tape, p, x, graph)?;
        }
        let pooled = tape.mean_axis1(x)?;
        let h = self.project.forward(tape, p, pooled)?;
        let mut h = tape.mish(h);
        let shape = tape.shape(h).to_vec();
        let pos = tape.constant(sinusoidal_positions(shape[0], shape[1]));
        h = tape.add(h, pos)?;
        for e in &self.encoder {
            h = e.forward(tape, p, h)?;
        }
        self.norm.forward(tape, p, h)
    }

    /// Encodes a clip on a fresh tape without gradients.
    pub fn encode(&self, store: &ParamStore, clip: &LandmarkClip, graph: &LipGraph) -> Result<Tensor, GraphError> {
        if clip.is_empty() {
            return Err(GraphError::EmptyClip);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(clip.frames().clone());
        let y = self.forward(&mut tape, &p, x, graph)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn canonical_template_has_117_unit_square_points() {
        let t = LipTemplate::canonical();
        assert_eq!(t.len(), NODE_COUNT);
        assert!(t.positions().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let reparsed = LipTemplate::parse(&t.to_text()).unwrap();
        assert!(reparsed.positions().max_abs_diff(t.positions()) < 1e-6);
    }

    #[test]
    fn template_parse_errors_name_the_line() {
        let err = LipTemplate::parse("0 0.1 0.2\n2 0.3 0.4\n").unwrap_err();
        assert!(matches!(err, GraphError::Template { line: 2, .. }));
        assert!(LipTemplate::parse("0 0.1 1.2\n").is_err());
    }

    #[test]
    fn full_neighbourhood_is_complete_graph() {
        let g = LipGraph::canonical(116).unwrap();
        assert_eq!(g.edges().len(), 117 * 116 / 2);
    }

    #[test]
    fn one_nearest_neighbour_on_a_line_is_a_chain() {
        let n = NODE_COUNT;
        let pos = Tensor::from_fn(&[n, 2], |i| if i % 2 == 0 { (i / 2) as f64 / n as f64 } else { 0.5 });
        let g = build_lip_adjacency(&pos, &[], 1).unwrap();
        // brute-force nearest neighbour, lower index on ties
        let mut expect = BTreeSet::new();
        for i in 0..n {
            let mut best = (f64::INFINITY, 0);
            for j in 0..n {
                if j != i {
                    let d = ((i as f64) - (j as f64)).abs();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
            }
            expect.insert(ordered(i, best.1));
        }
        let chain: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        assert_eq!(expect.into_iter().collect::<Vec<_>>(), chain);
        assert_eq!(g.edges(), chain.as_slice());
    }

    #[test]
    fn canonical_graph_is_connected_symmetric_with_self_loops() {
        for k in [1, 2, 4, 8] {
            let g = LipGraph::canonical(k).unwrap();
            assert!(g.is_connected());
            let a = g.adjacency();
            for i in 0..NODE_COUNT {
                assert!(a.at(&[i, i]) > 0.0);
                for j in 0..NODE_COUNT {
                    assert!(a.at(&[i, j]) >= 0.0);
                    assert_eq!(a.at(&[i, j]), a.at(&[j, i]));
                }
            }
        }
    }

    #[test]
    fn connectivity_is_enforced_between_far_clusters() {
        let pos = Tensor::new(&[4, 2], vec![0.0, 0.0, 0.01, 0.0, 1.0, 1.0, 1.0, 0.99]).unwrap();
        let g = build_lip_adjacency(&pos, &[], 1).unwrap();
        assert!(g.is_connected());
        assert_eq!(g.edges().len(), 3);
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let pos = Tensor::full(&[5, 2], 0.3);
        assert_eq!(build_lip_adjacency(&pos, &[], 2).unwrap_err(), GraphError::DegeneratePositions);
        let pos = LipTemplate::canonical().positions().clone();
        assert_eq!(build_lip_adjacency(&pos, &[], 0).unwrap_err(), GraphError::InvalidNeighborCount);
    }

    #[test]
    fn normalization_hand_cases() {
        let a = normalize_adjacency(1, &[]);
        assert_eq!(a.data(), &[1.0]);
        let a = normalize_adjacency(2, &[(0, 1)]);
        for v in a.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    fn spectral_radius(a: &Tensor) -> f64 {
        let n = a.shape()[0];
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut w = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    w[i] += a.at(&[i, j]) * v[j];
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        lambda
    }

    #[test]
    fn spectral_radius_is_at_most_one() {
        for k in [1, 3, 4, 10] {
            let g = LipGraph::canonical(k).unwrap();
            let r = spectral_radius(g.adjacency());
            assert!(r <= 1.0 + 1e-9, "k={k}: {r}");
        }
    }

    #[test]
    fn clip_requires_zero_padding_for_invalid_frames() {
        let frames = Tensor::full(&[2, 3, 2], 0.5);
        assert!(LandmarkClip::new(frames.clone(), vec![true, false]).is_err());
        let clip = LandmarkClip::new(frames, vec![true, true]).unwrap().with_dropped(&[1]);
        assert_eq!(clip.valid(), &[true, false]);
        assert!(clip.frame_row(1).iter().all(|&v| v == 0.0));
        let rows = vec![vec![0.1; 6], vec![0.0; 6]];
        let c = LandmarkClip::from_rows(&rows, 3).unwrap();
        assert_eq!(c.valid(), &[true, false]);
        assert_eq!(LandmarkClip::from_rows(&[], 3).unwrap_err(), GraphError::EmptyClip);
    }

    #[test]
    fn landmark_stats_and_normalization() {
        let template = LipTemplate::canonical();
        let mut data: Vec<f64> = template.positions().data().iter().map(|v| v + 0.1).collect();
        data.extend(vec![0.0; 2 * NODE_COUNT]);
        let frames = Tensor::new(&[2, NODE_COUNT, 2], data).unwrap();
        let clip = LandmarkClip::new(frames, vec![true, false]).unwrap();
        let stats = LandmarkStats::from_clips(&template, [&clip]);
        assert!((stats.scale - 0.1).abs() < 1e-12);
        let x = clip.normalized(&template, stats);
        let half = x.len() / 2;
        assert!(x.data()[..half].iter().all(|&v| (v - 1.0).abs() < 1e-9));
        assert!(x.data()[half..].iter().all(|&v| v == 0.0));
        assert_eq!(LandmarkStats::from_clips(&template, []).scale, 1.0);
    }

    fn impulse_block(store: &mut ParamStore, c: usize, k: usize) -> StgcnBlock {
        let b = StgcnBlock::new(store, "b", c, c, k, &mut rng(1));
        *store.get_mut(b.weight) = Tensor::eye(c);
        let mut imp = Tensor::zeros(&[k, c]);
        imp.data_mut()[(k / 2) * c..(k / 2 + 1) * c].iter_mut().for_each(|v| *v = 1.0);
        *store.get_mut(b.temporal) = imp;
        b
    }

    #[test]
    fn degenerate_block_reduces_to_mish_plus_residual() {
        let mut store = ParamStore::new();
        let block = impulse_block(&mut store, 3, 3);
        let graph = LipGraph::identity(5);
        let x = Tensor::uniform(&[4, 5, 3], 2.0, &mut rng(2));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, &p, xv, &graph).unwrap();
        let m = tape.mish(xv);
        let expect = tape.add(m, xv).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(expect)) < 1e-14);
    }

    #[test]
    fn first_block_widens_two_to_sixty_four() {
        let mut store = ParamStore::new();
        let block = StgcnBlock::new(&mut store, "b0", 2, 64, 5, &mut rng(3));
        assert!(!block.residual);
        let graph = LipGraph::canonical(4).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::uniform(&[10, NODE_COUNT, 2], 1.0, &mut rng(4)));
        let y = block.forward(&mut tape, &p, x, &graph).unwrap();
        assert_eq!(tape.shape(y), &[10, NODE_COUNT, 64]);
    }

    #[test]
    fn block_gradient() {
        let mut store = ParamStore::new();
        let b0 = StgcnBlock::new(&mut store, "b0", 2, 3, 3, &mut rng(5));
        let b1 = StgcnBlock::new(&mut store, "b1", 3, 3, 3, &mut rng(6));
        let b2 = StgcnBlock::new(&mut store, "b2", 3, 2, 3, &mut rng(7));
        let graph = LipGraph::from_edges(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]);
        let mut inputs = store.values().to_vec();
        inputs.push(Tensor::uniform(&[4, 5, 2], 1.0, &mut rng(8)));
        let w = Tensor::uniform(&[4, 5, 2], 1.0, &mut rng(9));
        let r = grad_check(
            |t, v| {
                let n = v.len();
                let p = Bound::from_vars(v[..n - 1].to_vec());
                let y = b0.forward(t, &p, v[n - 1], &graph)?;
                let y = b1.forward(t, &p, y, &graph)?;
                let y = b2.forward(t, &p, y, &graph)?;
                let w = t.constant(w.clone());
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-5, "{r:?}");
    }

    #[test]
    fn block_is_equivariant_to_node_relabeling() {
        let mut store = ParamStore::new();
        let block = StgcnBlock::new(&mut store, "b", 2, 2, 3, &mut rng(10));
        let graph = LipGraph::from_edges(5, vec![(0, 1), (1, 2), (1, 3), (3, 4)]);
        let perm = [3, 0, 4, 1, 2];
        let pgraph = graph.permuted(&perm);
        let x = Tensor::uniform(&[3, 5, 2], 1.0, &mut rng(11));
        let mut px = Tensor::zeros(&[3, 5, 2]);
        for t in 0..3 {
            for n in 0..5 {
                for c in 0..2 {
                    px.data_mut()[(t * 5 + perm[n]) * 2 + c] = x.at(&[t, n, c]);
                }
            }
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let pxv = tape.constant(px);
        let y = block.forward(&mut tape, &p, xv, &graph).unwrap();
        let py = block.forward(&mut tape, &p, pxv, &pgraph).unwrap();
        for t in 0..3 {
            for n in 0..5 {
                for c in 0..2 {
                    let a = tape.value(y).at(&[t, n, c]);
                    let b = tape.value(py).at(&[t, perm[n], c]);
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn identity_graph_is_pointwise_linear() {
        let mut store = ParamStore::new();
        let block = StgcnBlock::new(&mut store, "b", 2, 3, 1, &mut rng(12));
        *store.get_mut(block.temporal) = Tensor::full(&[1, 3], 1.0);
        let graph = LipGraph::identity(4);
        let x = Tensor::uniform(&[2, 4, 2], 1.0, &mut rng(13));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, &p, xv, &graph).unwrap();
        let w = store.get(block.weight);
        for t in 0..2 {
            for n in 0..4 {
                for c in 0..3 {
                    let lin: f64 = (0..2).map(|i| x.at(&[t, n, i]) * w.at(&[i, c])).sum();
                    let expect = crate::tensor::kernels::mish(lin);
                    assert!((tape.value(y).at(&[t, n, c]) - expect).abs() < 1e-14);
                }
            }
        }
    }

    fn small_dims() -> PasrDims {
        PasrDims {
            gcn_channels: 4,
            gcn_blocks: 6,
            temporal_kernel: 3,
            d_enc: 8,
            heads: 2,
            ff_hidden: 16,
            encoder_layers: 1,
            conv_width: Some(3),
        }
    }

    #[test]
    fn encoder_handles_all_zero_clip_and_length_contract() {
        let mut store = ParamStore::new();
        let enc = PasrEncoder::new(&mut store, "pasr", &small_dims(), &mut rng(14));
        assert_eq!(enc.blocks.len(), 6);
        let graph = LipGraph::canonical(4).unwrap();
        let zero = LandmarkClip::new(Tensor::zeros(&[4, NODE_COUNT, 2]), vec![false; 4]).unwrap();
        let out = enc.encode(&store, &zero, &graph).unwrap();
        assert_eq!(out.shape(), &[4, 8]);
        assert!(out.all_finite());
        let template = LipTemplate::canonical();
        let base = template.positions().data();
        let clip_of = |t: usize| {
            let frames = Tensor::from_fn(&[t, NODE_COUNT, 2], |i| base[i % base.len()]);
            LandmarkClip::new(frames, vec![true; t]).unwrap()
        };
        let (short, long) = (clip_of(4), clip_of(8));
        assert_eq!(enc.encode(&store, &short, &graph).unwrap().shape()[0], 4);
        assert_eq!(enc.encode(&store, &long, &graph).unwrap().shape()[0], 8);
    }
}
