//! Dense re-evaluation of the sparse U-Net on a cubic box.
//!
//! Every level is a full `D³ × C` array with an occupancy mask. Convolutions
//! visit all 27 neighbours of every occupied cell, pooling averages the
//! occupied cells of each 2×2×2 block and unpooling copies a block's value back
//! into its occupied cells.

use gsd_core::geometry::SparseUNet;
use gsd_core::nn::{Linear, ParamStore};

pub struct Dense {
    pub side: usize,
    pub channels: usize,
    pub mask: Vec<bool>,
    pub data: Vec<f64>,
}

impl Dense {
    fn zeros(side: usize, channels: usize, mask: Vec<bool>) -> Self {
        Self {
            side,
            channels,
            data: vec![0.0; side * side * side * channels],
            mask,
        }
    }

    fn cell(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.side + y) * self.side + z
    }

    pub fn at(&self, c: [usize; 3]) -> &[f64] {
        let i = self.cell(c[0], c[1], c[2]);
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            side: self.side,
            channels: self.channels,
            mask: self.mask.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn relu(x: &Dense) -> Dense {
    x.map(|v| v.max(0.0))
}

fn add(a: &Dense, b: &Dense) -> Dense {
    let mut out = a.map(|v| v);
    out.data.iter_mut().zip(&b.data).for_each(|(o, v)| *o += v);
    out
}

fn concat(a: &Dense, b: &Dense) -> Dense {
    let c = a.channels + b.channels;
    let mut out = Dense::zeros(a.side, c, a.mask.clone());
    for i in 0..a.mask.len() {
        out.data[i * c..i * c + a.channels].copy_from_slice(&a.data[i * a.channels..(i + 1) * a.channels]);
        out.data[i * c + a.channels..(i + 1) * c].copy_from_slice(&b.data[i * b.channels..(i + 1) * b.channels]);
    }
    out
}

fn linear(store: &ParamStore, l: &Linear, x: &Dense) -> Dense {
    let w = store.get(l.weight).data();
    let b = store.get(l.bias).data();
    let (cin, cout) = (l.fan_in, l.fan_out);
    let mut out = Dense::zeros(x.side, cout, x.mask.clone());
    for i in 0..x.mask.len() {
        if !x.mask[i] {
            continue;
        }
        for o in 0..cout {
            let mut acc = b[o];
            for k in 0..cin {
                acc += x.data[i * cin + k] * w[k * cout + o];
            }
            out.data[i * cout + o] = acc;
        }
    }
    out
}

/// 3×3×3 convolution evaluated at occupied cells only. The weight stacks one
/// `C_in × C_out` block per offset, offsets ordered x-major with -1 first.
fn conv(store: &ParamStore, l: &Linear, x: &Dense) -> Dense {
    let w = store.get(l.weight).data();
    let b = store.get(l.bias).data();
    let cin = x.channels;
    let cout = l.fan_out;
    assert_eq!(l.fan_in, 27 * cin);
    let d = x.side as i64;
    let mut out = Dense::zeros(x.side, cout, x.mask.clone());
    for cx in 0..d {
        for cy in 0..d {
            for cz in 0..d {
                let i = x.cell(cx as usize, cy as usize, cz as usize);
                if !x.mask[i] {
                    continue;
                }
                let mut acc = b.to_vec();
                let mut slot = 0;
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let (nx, ny, nz) = (cx + dx, cy + dy, cz + dz);
                            let inside = (0..d).contains(&nx) && (0..d).contains(&ny) && (0..d).contains(&nz);
                            if inside {
                                let j = x.cell(nx as usize, ny as usize, nz as usize);
                                if x.mask[j] {
                                    for k in 0..cin {
                                        let v = x.data[j * cin + k];
                                        let row = &w[(slot * cin + k) * cout..(slot * cin + k + 1) * cout];
                                        acc.iter_mut().zip(row).for_each(|(a, wv)| *a += v * wv);
                                    }
                                }
                            }
                            slot += 1;
                        }
                    }
                }
                out.data[i * cout..(i + 1) * cout].copy_from_slice(&acc);
            }
        }
    }
    out
}

fn pool(x: &Dense) -> Dense {
    let half = x.side.div_ceil(2);
    let c = x.channels;
    let mut sum = Dense::zeros(half, c, vec![false; half * half * half]);
    let mut count = vec![0usize; half * half * half];
    for cx in 0..x.side {
        for cy in 0..x.side {
            for cz in 0..x.side {
                let i = x.cell(cx, cy, cz);
                if !x.mask[i] {
                    continue;
                }
                let p = sum.cell(cx / 2, cy / 2, cz / 2);
                sum.mask[p] = true;
                count[p] += 1;
                for k in 0..c {
                    sum.data[p * c + k] += x.data[i * c + k];
                }
            }
        }
    }
    for (p, &n) in count.iter().enumerate() {
        if n > 0 {
            sum.data[p * c..(p + 1) * c].iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sum
}

fn unpool(coarse: &Dense, fine_mask: &[bool], side: usize) -> Dense {
    let c = coarse.channels;
    let mut out = Dense::zeros(side, c, fine_mask.to_vec());
    for cx in 0..side {
        for cy in 0..side {
            for cz in 0..side {
                let i = out.cell(cx, cy, cz);
                if fine_mask[i] {
                    let p = coarse.cell(cx / 2, cy / 2, cz / 2);
                    out.data[i * c..(i + 1) * c].copy_from_slice(&coarse.data[p * c..(p + 1) * c]);
                }
            }
        }
    }
    out
}

/// Evaluates `net` on the occupied cells of a `side³` box. Cells are indexed
/// from the per-axis minimum of the occupied set, and the input feature of a
/// cell is its offset from that minimum divided by the largest axis extent.
pub fn dense_unet(store: &ParamStore, net: &SparseUNet, side: usize, occupied: &[[usize; 3]]) -> Dense {
    let lo: [usize; 3] = std::array::from_fn(|a| occupied.iter().map(|c| c[a]).min().unwrap());
    let hi: [usize; 3] = std::array::from_fn(|a| occupied.iter().map(|c| c[a]).max().unwrap());
    let extent = (0..3).map(|a| hi[a] - lo[a]).max().unwrap().max(1) as f64;
    let mut input = Dense::zeros(side, 3, vec![false; side * side * side]);
    for c in occupied {
        let rel = [c[0] - lo[0], c[1] - lo[1], c[2] - lo[2]];
        let i = input.cell(rel[0], rel[1], rel[2]);
        input.mask[i] = true;
        for a in 0..3 {
            input.data[i * 3 + a] = rel[a] as f64 / extent;
        }
    }

    let h = linear(store, &net.embed, &input);
    let e0 = relu(&conv(store, &net.enc0.linear, &h));
    let e1 = relu(&conv(store, &net.enc1.linear, &pool(&e0)));
    let e2 = relu(&conv(store, &net.enc2.linear, &pool(&e1)));
    let r = relu(&conv(store, &net.res_a.linear, &e2));
    let r = relu(&add(&e2, &conv(store, &net.res_b.linear, &r)));
    let u1 = concat(&unpool(&r, &e1.mask, e1.side), &e1);
    let d1 = relu(&conv(store, &net.dec1.linear, &u1));
    conv(store, &net.dec0.linear, &unpool(&d1, &e0.mask, e0.side))
}
