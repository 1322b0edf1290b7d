use rand::Rng;

use super::encoding::positional_encode;
use crate::error::{Error, Result};
use crate::geometry::{GeometryEncoder, GeometrySpec, SparseVoxelGrid, UNetPlan};
use crate::nn::{Activation, Mlp, MlpSpec, ParamStore, Tape, Tensor, Var};

pub const DX: std::ops::Range<usize> = 0..3;
pub const DR: std::ops::Range<usize> = 3..9;
pub const DS: std::ops::Range<usize> = 9..12;
pub const OUTPUT_WIDTH: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformSpec {
    pub pos_levels: usize,
    pub time_levels: usize,
    pub width: usize,
    /// Number of linear layers in the decoder.
    pub depth: usize,
    /// Layer whose input is concatenated with the decoder input.
    pub skip_at: usize,
    /// When false the decoder sees the identity branch directly.
    pub geometry_branch: bool,
    pub geometry: GeometrySpec,
}

impl Default for DeformSpec {
    fn default() -> Self {
        Self {
            pos_levels: 10,
            time_levels: 6,
            width: 256,
            depth: 5,
            skip_at: 2,
            geometry_branch: true,
            geometry: GeometrySpec::default(),
        }
    }
}

/// Per-Gaussian offsets at one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationOutput {
    pub dx: Tensor,
    pub dr6: Tensor,
    pub ds: Tensor,
}

impl DeformationOutput {
    pub fn zeros(n: usize) -> Self {
        Self {
            dx: Tensor::zeros(&[n, 3]),
            dr6: Tensor::zeros(&[n, 6]),
            ds: Tensor::zeros(&[n, 3]),
        }
    }

    /// Split a decoder output of width 12.
    pub fn from_raw(raw: &Tensor) -> Result<Self> {
        if raw.rank() != 2 || raw.shape()[1] != OUTPUT_WIDTH {
            return Err(Error::dim("deformation output", format!("[N, {OUTPUT_WIDTH}]"), format!("{:?}", raw.shape())));
        }
        let n = raw.rows();
        let cols = |r: std::ops::Range<usize>| {
            let w = r.len();
            let data = (0..n).flat_map(|i| raw.row(i)[r.clone()].to_vec()).collect();
            Tensor::matrix(n, w, data).expect("sized")
        };
        let out = Self {
            dx: cols(DX),
            dr6: cols(DR),
            ds: cols(DS),
        };
        if !(out.dx.all_finite() && out.dr6.all_finite() && out.ds.all_finite()) {
            return Err(Error::Parameter("deformation output is not finite".into()));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.dx.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Geometry encoder plus the deformation decoder, with their weights.
#[derive(Clone, Debug)]
pub struct DeformationNetwork {
    pub spec: DeformSpec,
    pub store: ParamStore,
    pub geometry: GeometryEncoder,
    pub decoder: Mlp,
}

/// Voxel structures the geometry branch needs for one forward pass.
#[derive(Clone, Copy)]
pub struct VoxelInputs<'v> {
    pub grid: &'v SparseVoxelGrid,
    pub plan: &'v UNetPlan,
    pub point_index: &'v std::sync::Arc<[usize]>,
}

impl DeformationNetwork {
    /// Kaiming-initialized layers with a zero output layer, so the initial
    /// deformation is exactly the identity.
    pub fn new<R: Rng>(spec: DeformSpec, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let geometry = GeometryEncoder::new(&mut store, "geometry", spec.geometry, rng);
        let feature_width = if spec.geometry_branch {
            geometry.fused_width()
        } else {
            geometry.identity_width()
        };
        let input = feature_width + 3 * 2 * spec.pos_levels + 2 * spec.time_levels;
        let decoder = Mlp::new(
            &mut store,
            "decoder",
            &MlpSpec {
                input,
                hidden: vec![spec.width; spec.depth - 1],
                output: OUTPUT_WIDTH,
                skip_at: Some(spec.skip_at),
                output_activation: Activation::Identity,
                zero_last: true,
            },
            rng,
        );
        Self {
            spec,
            store,
            geometry,
            decoder,
        }
    }

    pub fn decoder_input_width(&self) -> usize {
        self.decoder.input_width()
    }

    /// Decoder output (`N × 12`) for canonical `positions` at time `t`.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        positions: Var,
        voxels: Option<VoxelInputs<'_>>,
        t: f64,
    ) -> Result<Var> {
        check_time(t)?;
        let features = self.features(tape, positions, voxels)?;
        self.decode(tape, features, positions, t)
    }

    /// `F_fuse`, or the identity-branch feature when the geometry branch is off.
    pub fn features<'a>(&'a self, tape: &mut Tape<'a>, positions: Var, voxels: Option<VoxelInputs<'_>>) -> Result<Var> {
        if self.spec.geometry_branch {
            let v = voxels.ok_or_else(|| Error::Consistency("geometry branch needs voxel inputs".into()))?;
            Ok(self
                .geometry
                .forward(tape, &self.store, positions, v.grid, v.plan, v.point_index)?
                .f_fuse)
        } else {
            self.geometry.identity.forward(tape, &self.store, positions)
        }
    }

    /// Decoder applied to `concat(features, γ(x), γ(t))`.
    pub fn decode<'a>(&'a self, tape: &mut Tape<'a>, features: Var, positions: Var, t: f64) -> Result<Var> {
        check_time(t)?;
        let n = tape.value(positions).rows();
        let gx = tape.posenc(positions, self.spec.pos_levels)?;
        let gt_row: Vec<f64> = positional_encode(t, self.spec.time_levels).collect();
        let gt = Tensor::matrix(n, gt_row.len(), gt_row.iter().copied().cycle().take(n * gt_row.len()).collect())?;
        let gt = tape.constant(gt);
        let input = tape.concat_cols(&[features, gx, gt])?;
        self.decoder.forward(tape, &self.store, input)
    }

    /// Named parameter tensors, in storage order.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.store.iter().map(|(_, n, t)| (n, t))
    }

    /// Replace weights from named tensors; every parameter must be present
    /// with a matching shape.
    pub fn load_params(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let (_, t) = records
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::format("weight file", format!("missing tensor `{name}`")))?;
            if t.shape() != self.store.get(id).shape() {
                return Err(Error::dim(
                    format!("tensor `{name}`"),
                    format!("{:?}", self.store.get(id).shape()),
                    format!("{:?}", t.shape()),
                ));
            }
            *self.store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

pub fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("timestamp {t} outside [0, 1]")));
    }
    Ok(())
}

/// Decoder output for given features `F_fuse` and canonical positions `x`.
pub fn decode_deformation(net: &DeformationNetwork, f_fuse: &Tensor, x: &Tensor, t: f64) -> Result<DeformationOutput> {
    let mut tape = Tape::new();
    let f = tape.constant(f_fuse.clone());
    let x = tape.constant(x.clone());
    let y = net.decode(&mut tape, f, x, t)?;
    DeformationOutput::from_raw(tape.value(y))
}

/// Full network evaluation (features and decoder) without keeping the tape.
pub fn deform_positions(
    net: &DeformationNetwork,
    positions: &Tensor,
    voxels: Option<VoxelInputs<'_>>,
    t: f64,
) -> Result<DeformationOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(positions.clone());
    let y = net.forward(&mut tape, x, voxels, t)?;
    DeformationOutput::from_raw(tape.value(y))
}
