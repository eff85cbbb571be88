//! Two-level structured mesh on the unit square.
//!
//! The coarse grid splits `[0,1]^2` into `nc x nc` square blocks, each block is
//! refined into `nf x nf` bilinear cells. Degrees of freedom are the fine nodes
//! of every block, numbered block by block; nodes lying on a coarse edge are
//! stored once per adjacent block, so the discrete space is the direct sum of
//! the per-block conforming spaces.

use std::ops::Range;

use thiserror::Error;

pub type BlockId = usize;
pub type CellId = usize;
pub type Dof = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MeshError {
    #[error("degenerate mesh: nc={nc}, nf_per_block={nf} (both must be >= 1)")]
    Degenerate { nc: usize, nf: usize },
    #[error("block id {block} out of range (mesh has {num_blocks} blocks)")]
    InvalidBlock { block: BlockId, num_blocks: usize },
}

/// Orientation of a coarse edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeAxis {
    /// Edge parallel to the y axis (normal along x).
    Vertical,
    /// Edge parallel to the x axis (normal along y).
    Horizontal,
}

/// One fine cell edge lying on a coarse edge.
#[derive(Debug, Clone, PartialEq)]
pub struct FineSegment {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub plus_cell: CellId,
    /// Dofs of the plus block at `start` and `end`.
    pub plus_nodes: [Dof; 2],
    pub minus_cell: Option<CellId>,
    pub minus_nodes: Option<[Dof; 2]>,
}

impl FineSegment {
    pub fn length(&self) -> f64 {
        let dx = self.end[0] - self.start[0];
        let dy = self.end[1] - self.start[1];
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseEdge {
    pub id: usize,
    pub axis: EdgeAxis,
    pub plus_block: BlockId,
    /// `None` on the domain boundary.
    pub minus_block: Option<BlockId>,
    /// Unit normal pointing from the plus block to the minus block, or outward.
    pub normal: [f64; 2],
    pub fine_segments: Vec<FineSegment>,
}

impl CoarseEdge {
    pub fn is_boundary(&self) -> bool {
        self.minus_block.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    nc: usize,
    nf: usize,
    coarse_edges: Vec<CoarseEdge>,
}

impl MeshHierarchy {
    pub fn new(nc: usize, nf_per_block: usize) -> Result<Self, MeshError> {
        if nc == 0 || nf_per_block == 0 {
            return Err(MeshError::Degenerate { nc, nf: nf_per_block });
        }
        let mut mesh = Self {
            nc,
            nf: nf_per_block,
            coarse_edges: Vec::new(),
        };
        mesh.coarse_edges = mesh.build_edges();
        Ok(mesh)
    }

    pub fn nc(&self) -> usize {
        self.nc
    }

    pub fn nf_per_block(&self) -> usize {
        self.nf
    }

    /// Coarse mesh size `H`.
    pub fn coarse_size(&self) -> f64 {
        1.0 / self.nc as f64
    }

    /// Fine mesh size `h`.
    pub fn fine_size(&self) -> f64 {
        1.0 / (self.nc * self.nf) as f64
    }

    pub fn num_blocks(&self) -> usize {
        self.nc * self.nc
    }

    /// Fine cells along one side of the domain.
    pub fn cells_per_dim(&self) -> usize {
        self.nc * self.nf
    }

    pub fn num_cells(&self) -> usize {
        self.cells_per_dim() * self.cells_per_dim()
    }

    pub fn nodes_per_block(&self) -> usize {
        (self.nf + 1) * (self.nf + 1)
    }

    pub fn num_dofs(&self) -> usize {
        self.num_blocks() * self.nodes_per_block()
    }

    pub fn check_block(&self, block: BlockId) -> Result<(), MeshError> {
        if block < self.num_blocks() {
            Ok(())
        } else {
            Err(MeshError::InvalidBlock {
                block,
                num_blocks: self.num_blocks(),
            })
        }
    }

    pub fn block_id(&self, bx: usize, by: usize) -> BlockId {
        by * self.nc + bx
    }

    pub fn block_coords(&self, block: BlockId) -> (usize, usize) {
        (block % self.nc, block / self.nc)
    }

    /// Contiguous range of global dofs owned by `block`.
    pub fn block_dofs(&self, block: BlockId) -> Range<Dof> {
        let npb = self.nodes_per_block();
        block * npb..(block + 1) * npb
    }

    pub fn dof(&self, block: BlockId, ix: usize, iy: usize) -> Dof {
        block * self.nodes_per_block() + iy * (self.nf + 1) + ix
    }

    pub fn dof_block(&self, dof: Dof) -> BlockId {
        dof / self.nodes_per_block()
    }

    pub fn dof_coords(&self, dof: Dof) -> [f64; 2] {
        let npb = self.nodes_per_block();
        let block = dof / npb;
        let local = dof % npb;
        let (bx, by) = self.block_coords(block);
        let ix = local % (self.nf + 1);
        let iy = local / (self.nf + 1);
        let h = self.fine_size();
        [
            (bx * self.nf + ix) as f64 * h,
            (by * self.nf + iy) as f64 * h,
        ]
    }

    /// Global fine lattice node `(gx, gy)` of a dof, in units of `h`.
    pub fn dof_lattice(&self, dof: Dof) -> (usize, usize) {
        let npb = self.nodes_per_block();
        let (bx, by) = self.block_coords(dof / npb);
        let local = dof % npb;
        (
            bx * self.nf + local % (self.nf + 1),
            by * self.nf + local / (self.nf + 1),
        )
    }

    /// Cells are numbered row-major over the whole fine lattice, row 0 at the bottom.
    pub fn cell_id(&self, gx: usize, gy: usize) -> CellId {
        gy * self.cells_per_dim() + gx
    }

    pub fn cell_coords(&self, cell: CellId) -> (usize, usize) {
        (cell % self.cells_per_dim(), cell / self.cells_per_dim())
    }

    pub fn cell_block(&self, cell: CellId) -> BlockId {
        let (gx, gy) = self.cell_coords(cell);
        self.block_id(gx / self.nf, gy / self.nf)
    }

    pub fn cell_center(&self, cell: CellId) -> [f64; 2] {
        let (gx, gy) = self.cell_coords(cell);
        let h = self.fine_size();
        [(gx as f64 + 0.5) * h, (gy as f64 + 0.5) * h]
    }

    /// Lower-left corner of a cell.
    pub fn cell_origin(&self, cell: CellId) -> [f64; 2] {
        let (gx, gy) = self.cell_coords(cell);
        let h = self.fine_size();
        [gx as f64 * h, gy as f64 * h]
    }

    /// Cell nodes counterclockwise from the lower-left corner, as dofs of the
    /// block that owns the cell.
    pub fn cell_nodes(&self, cell: CellId) -> [Dof; 4] {
        let (gx, gy) = self.cell_coords(cell);
        let block = self.block_id(gx / self.nf, gy / self.nf);
        let (cx, cy) = (gx % self.nf, gy % self.nf);
        [
            self.dof(block, cx, cy),
            self.dof(block, cx + 1, cy),
            self.dof(block, cx + 1, cy + 1),
            self.dof(block, cx, cy + 1),
        ]
    }

    /// Cells of one block, row-major within the block.
    pub fn block_cells(&self, block: BlockId) -> impl Iterator<Item = CellId> + '_ {
        let (bx, by) = self.block_coords(block);
        let nf = self.nf;
        (0..nf).flat_map(move |cy| {
            (0..nf).map(move |cx| self.cell_id(bx * nf + cx, by * nf + cy))
        })
    }

    pub fn coarse_edges(&self) -> &[CoarseEdge] {
        &self.coarse_edges
    }

    pub fn num_interior_edges(&self) -> usize {
        self.coarse_edges.iter().filter(|e| !e.is_boundary()).count()
    }

    pub fn num_boundary_edges(&self) -> usize {
        self.coarse_edges.iter().filter(|e| e.is_boundary()).count()
    }

    /// Blocks sharing an edge with `block`.
    pub fn edge_neighbors(&self, block: BlockId) -> Vec<BlockId> {
        let (bx, by) = self.block_coords(block);
        let mut out = Vec::with_capacity(4);
        if by > 0 {
            out.push(self.block_id(bx, by - 1));
        }
        if bx > 0 {
            out.push(self.block_id(bx - 1, by));
        }
        if bx + 1 < self.nc {
            out.push(self.block_id(bx + 1, by));
        }
        if by + 1 < self.nc {
            out.push(self.block_id(bx, by + 1));
        }
        out
    }

    /// Chebyshev distance between two blocks in the coarse lattice.
    pub fn block_distance(&self, a: BlockId, b: BlockId) -> usize {
        let (ax, ay) = self.block_coords(a);
        let (bx, by) = self.block_coords(b);
        ax.abs_diff(bx).max(ay.abs_diff(by))
    }

    fn build_edges(&self) -> Vec<CoarseEdge> {
        let nc = self.nc;
        let nf = self.nf;
        let mut edges = Vec::with_capacity(2 * nc * (nc - 1) + 4 * nc);

        // Vertical edge at x = i*H between column i-1 (plus, left) and i (minus, right).
        for by in 0..nc {
            for i in 0..=nc {
                let (plus, minus, normal) = if i == 0 {
                    (self.block_id(0, by), None, [-1.0, 0.0])
                } else if i == nc {
                    (self.block_id(nc - 1, by), None, [1.0, 0.0])
                } else {
                    (self.block_id(i - 1, by), Some(self.block_id(i, by)), [1.0, 0.0])
                };
                // Local x index of the edge within the plus / minus block.
                let plus_ix = if i == 0 { 0 } else { nf };
                let segs = (0..nf)
                    .map(|k| {
                        let gy = by * nf + k;
                        let plus_gx = if i == 0 { 0 } else { i * nf - 1 };
                        FineSegment {
                            start: self.lattice_point(i * nf, gy),
                            end: self.lattice_point(i * nf, gy + 1),
                            plus_cell: self.cell_id(plus_gx, gy),
                            plus_nodes: [self.dof(plus, plus_ix, k), self.dof(plus, plus_ix, k + 1)],
                            minus_cell: minus.map(|_| self.cell_id(i * nf, gy)),
                            minus_nodes: minus.map(|mb| [self.dof(mb, 0, k), self.dof(mb, 0, k + 1)]),
                        }
                    })
                    .collect();
                edges.push(CoarseEdge {
                    id: edges.len(),
                    axis: EdgeAxis::Vertical,
                    plus_block: plus,
                    minus_block: minus,
                    normal,
                    fine_segments: segs,
                });
            }
        }

        // Horizontal edge at y = j*H between row j-1 (plus, below) and j (minus, above).
        for bx in 0..nc {
            for j in 0..=nc {
                let (plus, minus, normal) = if j == 0 {
                    (self.block_id(bx, 0), None, [0.0, -1.0])
                } else if j == nc {
                    (self.block_id(bx, nc - 1), None, [0.0, 1.0])
                } else {
                    (self.block_id(bx, j - 1), Some(self.block_id(bx, j)), [0.0, 1.0])
                };
                let plus_iy = if j == 0 { 0 } else { nf };
                let segs = (0..nf)
                    .map(|k| {
                        let gx = bx * nf + k;
                        let plus_gy = if j == 0 { 0 } else { j * nf - 1 };
                        FineSegment {
                            start: self.lattice_point(gx, j * nf),
                            end: self.lattice_point(gx + 1, j * nf),
                            plus_cell: self.cell_id(gx, plus_gy),
                            plus_nodes: [self.dof(plus, k, plus_iy), self.dof(plus, k + 1, plus_iy)],
                            minus_cell: minus.map(|_| self.cell_id(gx, j * nf)),
                            minus_nodes: minus.map(|mb| [self.dof(mb, k, 0), self.dof(mb, k + 1, 0)]),
                        }
                    })
                    .collect();
                edges.push(CoarseEdge {
                    id: edges.len(),
                    axis: EdgeAxis::Horizontal,
                    plus_block: plus,
                    minus_block: minus,
                    normal,
                    fine_segments: segs,
                });
            }
        }
        edges
    }

    fn lattice_point(&self, gx: usize, gy: usize) -> [f64; 2] {
        let h = self.fine_size();
        [gx as f64 * h, gy as f64 * h]
    }
}

/// Oversampled region `K_{i,m}`: the center block plus `m` layers of blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRegion {
    pub center_block: BlockId,
    pub m: usize,
    /// Sorted ascending.
    pub member_blocks: Vec<BlockId>,
    nodes_per_block: usize,
}

impl BlockRegion {
    pub fn num_dofs(&self) -> usize {
        self.member_blocks.len() * self.nodes_per_block
    }

    /// Global dof -> local index within the region, or `None` outside it.
    pub fn local_index(&self, dof: Dof) -> Option<usize> {
        let block = dof / self.nodes_per_block;
        self.member_blocks
            .binary_search(&block)
            .ok()
            .map(|slot| slot * self.nodes_per_block + dof % self.nodes_per_block)
    }

    /// Local index -> global dof.
    pub fn global_dof(&self, local: usize) -> Dof {
        let slot = local / self.nodes_per_block;
        self.member_blocks[slot] * self.nodes_per_block + local % self.nodes_per_block
    }

    pub fn global_dofs(&self) -> impl Iterator<Item = Dof> + '_ {
        (0..self.num_dofs()).map(|l| self.global_dof(l))
    }

    pub fn contains_block(&self, block: BlockId) -> bool {
        self.member_blocks.binary_search(&block).is_ok()
    }

    pub fn block_slot(&self, block: BlockId) -> Option<usize> {
        self.member_blocks.binary_search(&block).ok()
    }
}

pub fn oversample_region(mesh: &MeshHierarchy, block: BlockId, m: usize) -> Result<BlockRegion, MeshError> {
    mesh.check_block(block)?;
    let nc = mesh.nc();
    let (cx, cy) = mesh.block_coords(block);
    let x0 = cx.saturating_sub(m);
    let y0 = cy.saturating_sub(m);
    let x1 = (cx + m).min(nc - 1);
    let y1 = (cy + m).min(nc - 1);
    let member_blocks = (y0..=y1)
        .flat_map(|by| (x0..=x1).map(move |bx| by * nc + bx))
        .collect();
    Ok(BlockRegion {
        center_block: block,
        m,
        member_blocks,
        nodes_per_block: mesh.nodes_per_block(),
    })
}
