//! Simplicial meshes: locally refined interval meshes in 1D and graded
//! L-shape triangulations in 2D, plus the coarse/fine DoF partition and
//! size/shape statistics the integrator needs.
//!
//! Meshes are plain data with documented invariants (conforming, positive
//! element measures, disjoint fine/coarse cover). Construction enforces them;
//! [`Mesh::validate`] re-checks after import. Node indices are 0-based and
//! ordered lexicographically by coordinates, so rebuilding the same mesh
//! reproduces the same numbering.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Conforming simplicial mesh with per-element refinement flags and wave
/// speeds.
///
/// `vertices` stores coordinates flat (`dim` per vertex), `elements` stores
/// vertex indices flat (`dim + 1` per element). `fine_flag[e]` marks element
/// `e` as part of the refined region; `speed[e]` is the elementwise constant
/// wave speed `c > 0`. `dirichlet_nodes` is sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub dim: usize,
    pub vertices: Vec<f64>,
    pub elements: Vec<usize>,
    pub fine_flag: Vec<bool>,
    pub speed: Vec<f64>,
    pub dirichlet_nodes: Vec<usize>,
}

/// Free-node ordering and the coarse/fine split of the degrees of freedom.
///
/// A free node is fine iff it touches at least one fine element, so the fine
/// set is the closure of the refined region intersected with the free nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DofPartition {
    /// Non-Dirichlet vertex indices, ascending.
    pub free_nodes: Vec<usize>,
    /// Per free node (aligned with `free_nodes`).
    pub fine_mask: Vec<bool>,
}

impl DofPartition {
    pub fn n_free(&self) -> usize {
        self.free_nodes.len()
    }

    pub fn n_fine(&self) -> usize {
        self.fine_mask.iter().filter(|&&f| f).count()
    }

    pub fn n_coarse(&self) -> usize {
        self.n_free() - self.n_fine()
    }

    /// `(coarse, fine)` counts.
    pub fn counts(&self) -> (usize, usize) {
        (self.n_coarse(), self.n_fine())
    }
}

/// Element-size and shape summary of a mesh.
#[derive(Debug, Clone, Copy)]
pub struct MeshStats {
    /// Largest element diameter.
    pub h_max: f64,
    /// Largest coarse-element diameter (`h_max` if nothing is coarse).
    pub h_c: f64,
    /// Largest fine-element diameter (0 if nothing is fine).
    pub h_f: f64,
    /// Max/min diameter ratio over coarse elements only.
    pub quasi_uniformity_c: f64,
    /// Max over elements of diameter / inball diameter; exactly 1 in 1D.
    pub shape_regularity: f64,
    /// Smallest coarse diameter over smallest global diameter; this is the
    /// step-ratio bound the integrator sizes `p` from.
    pub ratio_p_bound: f64,
}

impl Mesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len() / self.dim
    }

    pub fn n_elements(&self) -> usize {
        self.fine_flag.len()
    }

    pub fn nodes_per_element(&self) -> usize {
        self.dim + 1
    }

    /// Coordinates of vertex `i` (`dim` entries).
    pub fn vertex(&self, i: usize) -> &[f64] {
        &self.vertices[i * self.dim..(i + 1) * self.dim]
    }

    /// Vertex indices of element `e` (`dim + 1` entries).
    pub fn element(&self, e: usize) -> &[usize] {
        let k = self.nodes_per_element();
        &self.elements[e * k..(e + 1) * k]
    }

    /// Length (1D) or area (2D) of element `e`.
    pub fn element_measure(&self, e: usize) -> f64 {
        let el = self.element(e);
        match self.dim {
            1 => (self.vertices[el[1]] - self.vertices[el[0]]).abs(),
            _ => {
                let a = self.vertex(el[0]);
                let b = self.vertex(el[1]);
                let c = self.vertex(el[2]);
                0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs()
            }
        }
    }

    /// Diameter of element `e` (longest edge).
    pub fn element_diameter(&self, e: usize) -> f64 {
        let el = self.element(e);
        match self.dim {
            1 => (self.vertices[el[1]] - self.vertices[el[0]]).abs(),
            _ => {
                let mut h: f64 = 0.0;
                for i in 0..3 {
                    let a = self.vertex(el[i]);
                    let b = self.vertex(el[(i + 1) % 3]);
                    h = h.max(((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt());
                }
                h
            }
        }
    }

    /// Per-vertex Dirichlet indicator.
    pub fn dirichlet_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_vertices()];
        for &d in &self.dirichlet_nodes {
            mask[d] = true;
        }
        mask
    }

    /// Marks as fine exactly the elements all of whose vertices satisfy
    /// `pred`; every other element becomes coarse. The refined region stays a
    /// union of whole elements, which the DoF partition relies on.
    pub fn mark_fine_where(&mut self, pred: impl Fn(&[f64]) -> bool) {
        for e in 0..self.n_elements() {
            self.fine_flag[e] = self.element(e).iter().all(|&v| pred(self.vertex(v)));
        }
    }

    /// Structural soundness check: consistent array lengths, in-range
    /// indices, positive speeds and measures, no repeated vertex within an
    /// element, and conformity (a facet is shared by at most two elements;
    /// in 2D every vertex of a shared edge belongs to both, so hanging nodes
    /// are impossible by construction of the facet key).
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Mesh(m));
        if self.dim != 1 && self.dim != 2 {
            return err(format!("unsupported dimension {}", self.dim));
        }
        if !self.vertices.len().is_multiple_of(self.dim) {
            return err("vertex array length is not a multiple of dim".into());
        }
        let nv = self.n_vertices();
        let k = self.nodes_per_element();
        if !self.elements.len().is_multiple_of(k) {
            return err("element array length is not a multiple of dim+1".into());
        }
        let ne = self.elements.len() / k;
        if self.fine_flag.len() != ne || self.speed.len() != ne {
            return err("fine_flag/speed length disagrees with element count".into());
        }
        if self.vertices.iter().any(|x| !x.is_finite()) {
            return err("non-finite vertex coordinate".into());
        }
        let mut facets: HashMap<(usize, usize), u32> = HashMap::new();
        for e in 0..ne {
            let el = self.element(e);
            if el.iter().any(|&v| v >= nv) {
                return err(format!("element {e} references a vertex out of range"));
            }
            for i in 0..k {
                for j in i + 1..k {
                    if el[i] == el[j] {
                        return err(format!("element {e} repeats vertex {}", el[i]));
                    }
                }
            }
            if !(self.element_measure(e) > 0.0) {
                return err(format!("element {e} has zero measure"));
            }
            if !(self.speed[e] > 0.0) || !self.speed[e].is_finite() {
                return err(format!("element {e} has non-positive speed"));
            }
            match self.dim {
                1 => {
                    for &v in el {
                        *facets.entry((v, v)).or_insert(0) += 1;
                    }
                }
                _ => {
                    for i in 0..3 {
                        let (a, b) = (el[i], el[(i + 1) % 3]);
                        *facets.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                    }
                }
            }
        }
        if let Some((f, n)) = facets.iter().find(|&(_, &n)| n > 2) {
            return err(format!("facet {f:?} is shared by {n} elements"));
        }
        let mut last = None;
        for &d in &self.dirichlet_nodes {
            if d >= nv {
                return err(format!("Dirichlet node {d} out of range"));
            }
            if last == Some(d) {
                return err(format!("Dirichlet node {d} listed twice"));
            }
            if let Some(l) = last {
                if d < l {
                    return err("Dirichlet nodes not sorted".into());
                }
            }
            last = Some(d);
        }
        Ok(())
    }

    /// Serializes to the plain-text exchange format: a `dim n_vertices
    /// n_elements` header, one coordinate line per vertex, one `indices fine
    /// speed` line per element, and a final line of Dirichlet node indices.
    /// Reals carry 17 significant digits so a round-trip is bit-exact.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.dim, self.n_vertices(), self.n_elements());
        for i in 0..self.n_vertices() {
            let v = self.vertex(i);
            for (j, x) in v.iter().enumerate() {
                if j > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{x:.16e}");
            }
            s.push('\n');
        }
        for e in 0..self.n_elements() {
            for &v in self.element(e) {
                let _ = write!(s, "{v} ");
            }
            let _ = writeln!(s, "{} {:.16e}", u8::from(self.fine_flag[e]), self.speed[e]);
        }
        for (i, &d) in self.dirichlet_nodes.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{d}");
        }
        s.push('\n');
        s
    }

    /// Parses the format written by [`to_text`](Self::to_text) and validates
    /// the result.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut tok = text.split_whitespace();
        let mut next = |what: &str| {
            tok.next()
                .ok_or_else(|| Error::Mesh(format!("unexpected end of mesh text, wanted {what}")))
        };
        let parse_usize = |t: &str, what: &str| {
            t.parse::<usize>()
                .map_err(|_| Error::Mesh(format!("bad {what}: {t:?}")))
        };
        let parse_f64 = |t: &str, what: &str| {
            t.parse::<f64>()
                .map_err(|_| Error::Mesh(format!("bad {what}: {t:?}")))
        };

        let dim = parse_usize(next("dim")?, "dim")?;
        if dim != 1 && dim != 2 {
            return Err(Error::Mesh(format!("unsupported dimension {dim}")));
        }
        let nv = parse_usize(next("vertex count")?, "vertex count")?;
        let ne = parse_usize(next("element count")?, "element count")?;

        let mut vertices = Vec::with_capacity(nv * dim);
        for _ in 0..nv * dim {
            vertices.push(parse_f64(next("coordinate")?, "coordinate")?);
        }
        let k = dim + 1;
        let mut elements = Vec::with_capacity(ne * k);
        let mut fine_flag = Vec::with_capacity(ne);
        let mut speed = Vec::with_capacity(ne);
        for _ in 0..ne {
            for _ in 0..k {
                elements.push(parse_usize(next("element index")?, "element index")?);
            }
            match next("fine flag")? {
                "0" => fine_flag.push(false),
                "1" => fine_flag.push(true),
                t => return Err(Error::Mesh(format!("bad fine flag: {t:?}"))),
            }
            speed.push(parse_f64(next("speed")?, "speed")?);
        }
        let mut dirichlet_nodes = Vec::new();
        for t in tok {
            dirichlet_nodes.push(parse_usize(t, "Dirichlet index")?);
        }

        let mesh = Mesh {
            dim,
            vertices,
            elements,
            fine_flag,
            speed,
            dirichlet_nodes,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Reorders vertices lexicographically by coordinates; element, flag and
    /// Dirichlet data follow the permutation. Distinct vertices never share
    /// coordinates, so the order is total and deterministic.
    fn sort_vertices_lexicographic(&mut self) {
        let nv = self.n_vertices();
        let dim = self.dim;
        let mut order: Vec<usize> = (0..nv).collect();
        let coords = &self.vertices;
        order.sort_by(|&a, &b| {
            coords[a * dim..(a + 1) * dim]
                .iter()
                .zip(&coords[b * dim..(b + 1) * dim])
                .find_map(|(x, y)| {
                    let c = x.total_cmp(y);
                    (!c.is_eq()).then_some(c)
                })
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut new_index = vec![0usize; nv];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let mut vertices = vec![0.0; nv * dim];
        for (new, &old) in order.iter().enumerate() {
            vertices[new * dim..(new + 1) * dim]
                .copy_from_slice(&self.vertices[old * dim..(old + 1) * dim]);
        }
        self.vertices = vertices;
        for v in &mut self.elements {
            *v = new_index[*v];
        }
        for d in &mut self.dirichlet_nodes {
            *d = new_index[*d];
        }
        self.dirichlet_nodes.sort_unstable();
    }
}

/// Meshes `[0, 1]` with spacing `h_c` outside `[fine_lo, fine_hi]` and
/// `h_c / p` inside; both endpoints are Dirichlet. Each segment length must
/// be an integer multiple of its spacing (to rounding); a degenerate request
/// `fine_lo = fine_hi` is accepted and yields a purely coarse mesh.
pub fn build_interval_mesh(
    h_c: f64,
    fine_lo: f64,
    fine_hi: f64,
    p: u32,
    speed: f64,
) -> Result<Mesh> {
    if !(h_c > 0.0) || !h_c.is_finite() {
        return Err(Error::InvalidParam(format!("h_c must be > 0, got {h_c}")));
    }
    if p < 1 {
        return Err(Error::InvalidParam("p must be >= 1".into()));
    }
    if !(speed > 0.0) || !speed.is_finite() {
        return Err(Error::InvalidParam(format!("speed must be > 0, got {speed}")));
    }
    if !(0.0 <= fine_lo && fine_lo <= fine_hi && fine_hi <= 1.0) {
        return Err(Error::InvalidParam(format!(
            "fine region [{fine_lo}, {fine_hi}] must satisfy 0 <= lo <= hi <= 1"
        )));
    }
    let h_f = h_c / f64::from(p);
    let segments = [
        (0.0, fine_lo, h_c, false),
        (fine_lo, fine_hi, h_f, true),
        (fine_hi, 1.0, h_c, false),
    ];
    let mut xs = vec![0.0];
    let mut fine = Vec::new();
    for (a, b, h, is_fine) in segments {
        let len = b - a;
        if len == 0.0 {
            continue;
        }
        let n = (len / h).round();
        if n < 1.0 || (n * h - len).abs() > 1e-9 * len.max(h) {
            return Err(Error::Mesh(format!(
                "segment [{a}, {b}] is not an integer multiple of spacing {h}"
            )));
        }
        let n = n as usize;
        for i in 1..=n {
            // Endpoints are hit exactly; interior nodes are equispaced.
            let x = if i == n { b } else { a + len * (i as f64 / n as f64) };
            xs.push(x);
            fine.push(is_fine);
        }
    }
    let nv = xs.len();
    let mut elements = Vec::with_capacity(2 * (nv - 1));
    for i in 0..nv - 1 {
        elements.extend_from_slice(&[i, i + 1]);
    }
    let ne = nv - 1;
    let mesh = Mesh {
        dim: 1,
        vertices: xs,
        elements,
        fine_flag: fine,
        speed: vec![speed; ne],
        dirichlet_nodes: vec![0, nv - 1],
    };
    debug_assert!(mesh.validate().is_ok());
    Ok(mesh)
}

/// The seven boundary corners of the L-shape `(0,1)^2 minus [1/2,1) x (1/2,1]`,
/// walked counter-clockwise from one reentrant edge to the other. Rays from
/// the center `(1/2, 1/2)` to these corners bound the six macro-triangles.
const LSHAPE_CORNERS: [(f64, f64); 7] = [
    (1.0, 0.5),
    (1.0, 0.0),
    (0.5, 0.0),
    (0.0, 0.0),
    (0.0, 0.5),
    (0.0, 1.0),
    (0.5, 1.0),
];

/// Triangulates the L-shape with `N` layers graded toward the reentrant
/// corner at `(1/2, 1/2)`: along every center-to-corner ray, layer `k` sits
/// at relative distance `(k/N)^beta`, layer-`k` cross nodes are equispaced
/// along the layer chord of each macro-triangle, and each layer strip is cut
/// into `2k - 1` triangles in a fixed orientation. All boundary nodes are
/// Dirichlet; every element starts coarse with unit speed.
///
/// `beta = 1` is a uniform refinement of the six macro-triangles. Doubling
/// `N` reproduces every existing node coordinate bit-exactly, which nested
/// transfer between refinement levels depends on.
pub fn build_lshape_graded(n: u32, beta: f64) -> Result<Mesh> {
    if n < 2 {
        return Err(Error::InvalidParam(format!("N must be >= 2, got {n}")));
    }
    if !(beta >= 1.0) || !beta.is_finite() {
        return Err(Error::InvalidParam(format!("beta must be >= 1, got {beta}")));
    }
    let nn = n as usize;
    let mut coords: Vec<f64> = Vec::with_capacity(2 * (3 * nn * nn + 4 * nn + 1));
    let add = |coords: &mut Vec<f64>, x: f64, y: f64| -> usize {
        coords.push(x);
        coords.push(y);
        coords.len() / 2 - 1
    };
    let center = add(&mut coords, 0.5, 0.5);
    // rays[i][k] is the layer-k node on the ray toward corner i; k = 0 is the
    // shared center.
    let mut rays = vec![vec![center; nn + 1]; 7];
    for (i, &(cx, cy)) in LSHAPE_CORNERS.iter().enumerate() {
        for k in 1..=nn {
            let t = (k as f64 / n as f64).powf(beta);
            rays[i][k] = add(&mut coords, 0.5 + t * (cx - 0.5), 0.5 + t * (cy - 0.5));
        }
    }
    let mut elements: Vec<usize> = Vec::with_capacity(3 * 6 * nn * nn);
    for m in 0..6 {
        let mut inner = vec![center];
        for k in 1..=nn {
            let (ra, rb) = (rays[m][k], rays[m + 1][k]);
            let (ax, ay) = (coords[2 * ra], coords[2 * ra + 1]);
            let (bx, by) = (coords[2 * rb], coords[2 * rb + 1]);
            let mut outer = Vec::with_capacity(k + 1);
            outer.push(ra);
            for j in 1..k {
                let q = j as f64 / k as f64;
                outer.push(add(&mut coords, ax + q * (bx - ax), ay + q * (by - ay)));
            }
            outer.push(rb);
            for j in 0..k {
                elements.extend_from_slice(&[outer[j], outer[j + 1], inner[j.min(k - 1)]]);
            }
            for j in 0..k.saturating_sub(1) {
                elements.extend_from_slice(&[inner[j], outer[j + 1], inner[j + 1]]);
            }
            inner = outer;
        }
    }
    let mut dirichlet: BTreeSet<usize> = BTreeSet::new();
    // Reentrant edges: the full rays toward corners 0 and 6, center included.
    dirichlet.extend(&rays[0]);
    dirichlet.extend(&rays[6]);
    // Outer boundary: the whole outermost layer. The layer-N chords lie on
    // the straight boundary edges of the macro-triangles.
    let layer_n: Vec<usize> = (0..coords.len() / 2)
        .filter(|&v| {
            let d = (coords[2 * v] - 0.5).abs().max((coords[2 * v + 1] - 0.5).abs());
            d >= 0.5 * (1.0 - 1e-12)
        })
        .collect();
    dirichlet.extend(layer_n);

    let ne = elements.len() / 3;
    let mut mesh = Mesh {
        dim: 2,
        vertices: coords,
        elements,
        fine_flag: vec![false; ne],
        speed: vec![1.0; ne],
        dirichlet_nodes: dirichlet.into_iter().collect(),
    };
    mesh.sort_vertices_lexicographic();
    debug_assert!(mesh.validate().is_ok());
    Ok(mesh)
}

/// Splits the free (non-Dirichlet) nodes into fine and coarse: a node is fine
/// iff it is a vertex of at least one fine element.
pub fn partition_dofs(mesh: &Mesh) -> DofPartition {
    let mut touches_fine = vec![false; mesh.n_vertices()];
    for e in 0..mesh.n_elements() {
        if mesh.fine_flag[e] {
            for &v in mesh.element(e) {
                touches_fine[v] = true;
            }
        }
    }
    let dirichlet = mesh.dirichlet_mask();
    let free_nodes: Vec<usize> = (0..mesh.n_vertices()).filter(|&v| !dirichlet[v]).collect();
    let fine_mask = free_nodes.iter().map(|&v| touches_fine[v]).collect();
    DofPartition {
        free_nodes,
        fine_mask,
    }
}

/// Computes element-size statistics; see [`MeshStats`].
pub fn mesh_stats(mesh: &Mesh) -> MeshStats {
    let ne = mesh.n_elements();
    let mut h_max: f64 = 0.0;
    let mut h_min = f64::INFINITY;
    let mut hc_max: f64 = 0.0;
    let mut hc_min = f64::INFINITY;
    let mut hf_max: f64 = 0.0;
    let mut gamma: f64 = if mesh.dim == 1 { 1.0 } else { 0.0 };
    for e in 0..ne {
        let h = mesh.element_diameter(e);
        h_max = h_max.max(h);
        h_min = h_min.min(h);
        if mesh.fine_flag[e] {
            hf_max = hf_max.max(h);
        } else {
            hc_max = hc_max.max(h);
            hc_min = hc_min.min(h);
        }
        if mesh.dim == 2 {
            let el = mesh.element(e);
            let mut perimeter = 0.0;
            for i in 0..3 {
                let a = mesh.vertex(el[i]);
                let b = mesh.vertex(el[(i + 1) % 3]);
                perimeter += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            }
            // Inball diameter of a triangle is 4 * area / perimeter.
            let rho = 4.0 * mesh.element_measure(e) / perimeter;
            gamma = gamma.max(h / rho);
        }
    }
    let no_coarse = hc_min.is_infinite();
    if no_coarse {
        hc_max = h_max;
        hc_min = h_min;
    }
    MeshStats {
        h_max,
        h_c: hc_max,
        h_f: hf_max,
        quasi_uniformity_c: if ne == 0 { 1.0 } else { hc_max / hc_min },
        shape_regularity: gamma,
        ratio_p_bound: if ne == 0 { 1.0 } else { hc_min / h_min },
    }
}
