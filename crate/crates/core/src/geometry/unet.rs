//! Sparse 3D U-Net over occupied voxels.
//!
//! Convolutions are submanifold 3×3×3: outputs exist only at occupied voxels
//! and absent neighbours contribute zero. Downsampling averages the occupied
//! children of each 2×2×2 block; upsampling copies a parent's feature back to
//! each of its children.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::voxel::{bounds, SparseVoxelGrid, VoxelCoord};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore, Tape, Var, NO_NEIGHBOR};

pub const KERNEL_VOLUME: usize = 27;

/// Slot of offset `(dx, dy, dz) ∈ {-1,0,1}³` in a kernel.
pub fn kernel_offset_index(dx: i64, dy: i64, dz: i64) -> usize {
    ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize
}

#[derive(Clone, Debug)]
struct Level {
    coords: Vec<VoxelCoord>,
    neighbors: Arc<[u32]>,
    /// Parent index at the next level, per voxel (empty at the coarsest level).
    parent: Arc<[usize]>,
    /// Child count per next-level voxel.
    parent_counts: Arc<[usize]>,
}

/// Index tables for one voxel set: neighbours per level and pooling maps.
#[derive(Clone, Debug)]
pub struct UNetPlan {
    levels: Vec<Level>,
}

fn neighbor_table(coords: &[VoxelCoord]) -> Arc<[u32]> {
    let index: HashMap<VoxelCoord, u32> = coords.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect();
    let mut table = Vec::with_capacity(coords.len() * KERNEL_VOLUME);
    for c in coords {
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                    table.push(index.get(&n).copied().unwrap_or(NO_NEIGHBOR));
                }
            }
        }
    }
    table.into()
}

impl UNetPlan {
    /// Tables for `levels` resolutions, coordinates taken relative to the
    /// grid's minimum corner.
    pub fn new(grid: &SparseVoxelGrid, levels: usize) -> Self {
        let (lo, _) = bounds(&grid.voxel_coords);
        let mut coords: Vec<VoxelCoord> = grid
            .voxel_coords
            .iter()
            .map(|c| [c[0] - lo[0], c[1] - lo[1], c[2] - lo[2]])
            .collect();
        let mut out = Vec::with_capacity(levels);
        for l in 0..levels {
            let neighbors = neighbor_table(&coords);
            if l + 1 == levels {
                out.push(Level {
                    coords,
                    neighbors,
                    parent: Arc::from(Vec::new()),
                    parent_counts: Arc::from(Vec::new()),
                });
                break;
            }
            let halves: Vec<VoxelCoord> = coords.iter().map(|c| [c[0] >> 1, c[1] >> 1, c[2] >> 1]).collect();
            let mut next = halves.clone();
            next.sort_unstable();
            next.dedup();
            let index: HashMap<VoxelCoord, usize> = next.iter().enumerate().map(|(i, c)| (*c, i)).collect();
            let parent: Vec<usize> = halves.iter().map(|h| index[h]).collect();
            let mut counts = vec![0usize; next.len()];
            for &p in &parent {
                counts[p] += 1;
            }
            out.push(Level {
                coords,
                neighbors,
                parent: parent.into(),
                parent_counts: counts.into(),
            });
            coords = next;
        }
        Self { levels: out }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.levels[level].coords.len()
    }

    /// Coordinates at `level`, relative to the minimum corner.
    pub fn level_coords(&self, level: usize) -> &[VoxelCoord] {
        &self.levels[level].coords
    }

    /// Parent index of each voxel of `level` at `level + 1`.
    pub fn parents(&self, level: usize) -> &[usize] {
        &self.levels[level].parent
    }

    /// Neighbour table of `level`, `KERNEL_VOLUME` slots per voxel.
    pub fn neighbors(&self, level: usize) -> &[u32] {
        &self.levels[level].neighbors
    }
}

/// Submanifold convolution: gather the 27 neighbours, then a linear map
/// with weight `[27·C_in, C_out]`.
#[derive(Clone, Debug)]
pub struct SparseConv {
    pub linear: Linear,
    pub in_channels: usize,
}

impl SparseConv {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, name, KERNEL_VOLUME * cin, cout, Init::KaimingUniform, rng),
            in_channels: cin,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, plan: &UNetPlan, level: usize, x: Var) -> Result<Var> {
        let width = tape.value(x).shape()[1];
        if width != self.in_channels {
            return Err(Error::dim("sparse conv input channels", self.in_channels, width));
        }
        let w = tape.param(store, self.linear.weight);
        let b = tape.param(store, self.linear.bias);
        let y = tape.sparse_conv(x, w, plan.levels[level].neighbors.clone(), KERNEL_VOLUME)?;
        tape.add_bias(y, b)
    }
}

/// Channel widths of the U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetSpec {
    pub input: usize,
    pub embed: usize,
    pub mid: usize,
    pub bottleneck: usize,
    pub output: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self {
            input: 3,
            embed: 16,
            mid: 32,
            bottleneck: 64,
            output: 32,
        }
    }
}

/// Embed → Down → Down → Residual → Up (skip) → Up.
#[derive(Clone, Debug)]
pub struct SparseUNet {
    pub spec: UNetSpec,
    pub embed: Linear,
    pub enc0: SparseConv,
    pub enc1: SparseConv,
    pub enc2: SparseConv,
    pub res_a: SparseConv,
    pub res_b: SparseConv,
    pub dec1: SparseConv,
    pub dec0: SparseConv,
}

pub const UNET_LEVELS: usize = 3;

impl SparseUNet {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, spec: UNetSpec, rng: &mut R) -> Self {
        let UNetSpec {
            input,
            embed,
            mid,
            bottleneck,
            output,
        } = spec;
        let name = |s: &str| format!("{prefix}.{s}");
        Self {
            spec,
            embed: Linear::new(store, &name("embed"), input, embed, Init::KaimingUniform, rng),
            enc0: SparseConv::new(store, &name("enc0"), embed, embed, rng),
            enc1: SparseConv::new(store, &name("enc1"), embed, mid, rng),
            enc2: SparseConv::new(store, &name("enc2"), mid, bottleneck, rng),
            res_a: SparseConv::new(store, &name("res_a"), bottleneck, bottleneck, rng),
            res_b: SparseConv::new(store, &name("res_b"), bottleneck, bottleneck, rng),
            dec1: SparseConv::new(store, &name("dec1"), bottleneck + mid, mid, rng),
            dec0: SparseConv::new(store, &name("dec0"), mid, output, rng),
        }
    }

    /// Features per occupied voxel (`M × output`) from `M × input` features.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, plan: &UNetPlan, features: Var) -> Result<Var> {
        if plan.num_levels() != UNET_LEVELS {
            return Err(Error::Consistency(format!("u-net needs {UNET_LEVELS} levels, plan has {}", plan.num_levels())));
        }
        let rows = tape.value(features).rows();
        if rows != plan.level_size(0) {
            return Err(Error::Consistency(format!("{rows} voxel features for {} voxels", plan.level_size(0))));
        }
        let pool = |tape: &mut Tape<'a>, x: Var, l: usize| {
            let lv = &plan.levels[l];
            tape.segment_mean(x, lv.parent.clone(), lv.parent_counts.clone())
        };
        let unpool = |tape: &mut Tape<'a>, x: Var, l: usize| tape.gather_rows(x, plan.levels[l].parent.clone());

        let h = self.embed.forward(tape, store, features)?;
        let e0 = self.enc0.forward(tape, store, plan, 0, h)?;
        let e0 = tape.relu(e0);

        let p1 = pool(tape, e0, 0)?;
        let e1 = self.enc1.forward(tape, store, plan, 1, p1)?;
        let e1 = tape.relu(e1);

        let p2 = pool(tape, e1, 1)?;
        let e2 = self.enc2.forward(tape, store, plan, 2, p2)?;
        let e2 = tape.relu(e2);

        let r = self.res_a.forward(tape, store, plan, 2, e2)?;
        let r = tape.relu(r);
        let r = self.res_b.forward(tape, store, plan, 2, r)?;
        let r = tape.add(e2, r)?;
        let r = tape.relu(r);

        let u1 = unpool(tape, r, 1)?;
        let u1 = tape.concat_cols(&[u1, e1])?;
        let d1 = self.dec1.forward(tape, store, plan, 1, u1)?;
        let d1 = tape.relu(d1);

        let u0 = unpool(tape, d1, 0)?;
        self.dec0.forward(tape, store, plan, 0, u0)
    }

    pub fn convs(&self) -> [&SparseConv; 7] {
        [&self.enc0, &self.enc1, &self.enc2, &self.res_a, &self.res_b, &self.dec1, &self.dec0]
    }
}

/// Evaluate the U-Net without keeping the tape.
pub fn sparse_unet_forward(store: &ParamStore, unet: &SparseUNet, grid: &SparseVoxelGrid) -> Result<crate::nn::Tensor> {
    if grid.num_voxels() == 0 {
        return Err(Error::Parameter("empty voxel grid".into()));
    }
    let plan = UNetPlan::new(grid, UNET_LEVELS);
    let mut tape = Tape::new();
    let x = tape.constant(grid.voxel_features.clone());
    let y = unet.forward(&mut tape, store, &plan, x)?;
    Ok(tape.value(y).clone())
}
