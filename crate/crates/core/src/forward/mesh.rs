use super::ForwardError;

/// Number of boundary electrodes on the sensor.
pub const N_ELECTRODES: usize = 16;

/// Square-domain Q1 mesh on `[0, 1]²` with 16 boundary electrodes.
///
/// Nodes are numbered row by row: node `(i, j)` (column `i`, row `j`) has
/// index `j * (n + 1) + i` and sits at `(i / n, j / n)`. Element `(r, c)` is
/// the pixel covering `[c/n, (c+1)/n] × [r/n, (r+1)/n]` and has index
/// `r * n + c`, matching the row-major layout of a [`ConductivityImage`].
///
/// The perimeter is walked counter-clockwise from the corner `(0, 0)`:
/// bottom edge, right edge, top edge, left edge. Electrodes are numbered in
/// the same order, four per side.
///
/// [`ConductivityImage`]: super::ConductivityImage
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    grid_n: usize,
    electrode_width: usize,
    electrodes: Vec<Vec<usize>>,
}

impl Mesh {
    /// Builds the mesh, placing electrode `k` centred on perimeter position
    /// `round((k + 0.5) · 4n / 16)` and spanning `electrode_width` boundary
    /// edges.
    pub fn new(grid_n: usize, electrode_width: usize) -> Result<Self, ForwardError> {
        if grid_n < 16 {
            return Err(ForwardError::Geometry(format!(
                "grid_n must be at least 16, got {grid_n}"
            )));
        }
        if electrode_width == 0 || 16 * electrode_width + 16 > 4 * grid_n {
            return Err(ForwardError::Geometry(format!(
                "{N_ELECTRODES} electrodes of width {electrode_width} plus gaps do not fit a perimeter of {} edges",
                4 * grid_n
            )));
        }
        Self::place(grid_n, electrode_width)
    }

    /// Mesh whose electrodes are single boundary nodes at the same centre
    /// positions. Allows grids down to 8×8, which is too small for finite
    /// width electrodes to avoid the corners.
    pub fn with_point_electrodes(grid_n: usize) -> Result<Self, ForwardError> {
        if grid_n < 8 {
            return Err(ForwardError::Geometry(format!(
                "point electrodes need grid_n of at least 8, got {grid_n}"
            )));
        }
        Self::place(grid_n, 0)
    }

    fn place(grid_n: usize, electrode_width: usize) -> Result<Self, ForwardError> {
        let perim = 4 * grid_n;
        let mut positions = Vec::with_capacity(N_ELECTRODES);
        for k in 0..N_ELECTRODES {
            let center = ((k as f64 + 0.5) * perim as f64 / N_ELECTRODES as f64).round() as usize;
            let start = center - electrode_width / 2;
            let span: Vec<usize> = (start..=start + electrode_width).collect();
            if span.iter().any(|p| p % grid_n == 0) {
                return Err(ForwardError::Geometry(format!(
                    "electrode {k} (perimeter {start}..={}) would contain a corner node",
                    start + electrode_width
                )));
            }
            positions.push(span);
        }
        for k in 0..N_ELECTRODES {
            let next = &positions[(k + 1) % N_ELECTRODES];
            let last = *positions[k].last().unwrap();
            let first = next[0];
            let overlap = if k + 1 < N_ELECTRODES {
                first <= last
            } else {
                first + perim <= last
            };
            if overlap {
                return Err(ForwardError::Geometry(format!(
                    "electrodes {k} and {} overlap",
                    (k + 1) % N_ELECTRODES
                )));
            }
        }
        let mut mesh = Self {
            grid_n,
            electrode_width,
            electrodes: Vec::new(),
        };
        mesh.electrodes = positions
            .iter()
            .map(|span| span.iter().map(|&p| mesh.perimeter_node(p)).collect())
            .collect();
        Ok(mesh)
    }

    /// Mesh with the default electrode width `max(1, grid_n / 16)`.
    pub fn with_default_width(grid_n: usize) -> Result<Self, ForwardError> {
        Self::new(grid_n, default_electrode_width(grid_n))
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    /// Boundary edges spanned by each electrode; 0 for point electrodes.
    pub fn electrode_width(&self) -> usize {
        self.electrode_width
    }

    pub fn node_count(&self) -> usize {
        (self.grid_n + 1) * (self.grid_n + 1)
    }

    pub fn element_count(&self) -> usize {
        self.grid_n * self.grid_n
    }

    /// Node groups of the 16 electrodes, in perimeter order.
    pub fn electrodes(&self) -> &[Vec<usize>] {
        &self.electrodes
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.grid_n + 1) + i
    }

    /// Lattice coordinates `(i, j)` of a node.
    pub fn node_coords(&self, node: usize) -> (usize, usize) {
        (node % (self.grid_n + 1), node / (self.grid_n + 1))
    }

    /// Corner nodes of element `e`, counter-clockwise from the lower-left.
    #[inline]
    pub fn element_nodes(&self, e: usize) -> [usize; 4] {
        let (r, c) = (e / self.grid_n, e % self.grid_n);
        let n0 = self.node_index(c, r);
        let up = self.grid_n + 1;
        [n0, n0 + 1, n0 + 1 + up, n0 + up]
    }

    /// Node at perimeter position `p` (in edges, counter-clockwise from the
    /// origin corner).
    pub fn perimeter_node(&self, p: usize) -> usize {
        let n = self.grid_n;
        let p = p % (4 * n);
        match p / n {
            0 => self.node_index(p, 0),
            1 => self.node_index(n, p - n),
            2 => self.node_index(3 * n - p, n),
            _ => self.node_index(0, 4 * n - p),
        }
    }

    /// Half bandwidth of the node-numbered stiffness matrix.
    pub fn bandwidth(&self) -> usize {
        self.grid_n + 2
    }
}

pub fn default_electrode_width(grid_n: usize) -> usize {
    (grid_n / 16).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_counts() {
        let m = Mesh::with_default_width(80).unwrap();
        assert_eq!(m.element_count(), 6400);
        assert_eq!(m.node_count(), 6561);
        assert_eq!(m.electrode_width(), 5);
    }

    #[test]
    fn desk_scale_layout() {
        let m = Mesh::new(32, 2).unwrap();
        assert_eq!(m.electrodes().len(), 16);
        for e in m.electrodes() {
            assert_eq!(e.len(), 3);
        }
        // centres at perimeter 4, 12, 20, ... ; first electrode = nodes 3..=5 on y = 0
        assert_eq!(m.electrodes()[0], vec![3, 4, 5]);
        let centre = |k: usize| m.electrodes()[k][1];
        assert_eq!(m.node_coords(centre(1)), (12, 0));
        assert_eq!(m.node_coords(centre(4)), (32, 4));
        assert_eq!(m.node_coords(centre(8)), (28, 32));
        assert_eq!(m.node_coords(centre(12)), (0, 28));
    }

    #[test]
    fn infeasible_geometry() {
        assert!(matches!(Mesh::new(16, 4), Err(ForwardError::Geometry(_))));
        assert!(matches!(Mesh::new(8, 1), Err(ForwardError::Geometry(_))));
        // fits the perimeter count but the last electrode on each side reaches a corner
        assert!(matches!(Mesh::new(16, 3), Err(ForwardError::Geometry(_))));
    }

    #[test]
    fn no_corner_and_no_overlap() {
        for n in [16, 20, 24, 32, 40, 80] {
            let m = Mesh::with_default_width(n).unwrap();
            let corners = [
                m.node_index(0, 0),
                m.node_index(n, 0),
                m.node_index(n, n),
                m.node_index(0, n),
            ];
            let mut seen = std::collections::HashSet::new();
            for e in m.electrodes() {
                for node in e {
                    assert!(!corners.contains(node));
                    assert!(seen.insert(*node), "node {node} shared");
                }
            }
        }
    }

    #[test]
    fn point_electrodes_on_small_grid() {
        let m = Mesh::with_point_electrodes(8).unwrap();
        assert_eq!(m.electrode_width(), 0);
        let nodes: Vec<usize> = m
            .electrodes()
            .iter()
            .map(|e| {
                assert_eq!(e.len(), 1);
                e[0]
            })
            .collect();
        // perimeter positions 1, 3, 5, ... for n = 8
        for (k, node) in nodes.iter().enumerate() {
            assert_eq!(*node, m.perimeter_node(2 * k + 1));
        }
        assert!(Mesh::with_point_electrodes(7).is_err());
    }
}
