use super::tensor::{SparseVoxelTensor, SpatialShape, VoxelCoord};
use super::SparseError;

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMode {
    /// Stride 1, odd kernel; outputs only at active input sites.
    Submanifold,
    /// Regular sparse convolution; outputs wherever an active input reaches.
    Strided,
}

/// Kernel offsets in x-major order. Odd extents are centered on zero,
/// even extents run over `[0, k)`.
pub fn kernel_offsets(kernel: [usize; 3]) -> Vec<[i32; 3]> {
    let axis = |k: usize| -> Vec<i32> {
        if k % 2 == 1 {
            let r = (k / 2) as i32;
            (-r..=r).collect()
        } else {
            (0..k as i32).collect()
        }
    };
    let (ax, ay, az) = (axis(kernel[0]), axis(kernel[1]), axis(kernel[2]));
    let mut out = Vec::with_capacity(kernel.iter().product());
    for &dx in &ax {
        for &dy in &ay {
            for &dz in &az {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

fn validate(kernel: [usize; 3], stride: [usize; 3], mode: ConvMode) -> Result<(), SparseError> {
    if kernel.contains(&0) {
        return Err(SparseError::InvalidKernel {
            kernel,
            reason: "kernel extents must be at least 1",
        });
    }
    if stride.contains(&0) {
        return Err(SparseError::InvalidStride {
            stride,
            reason: "stride components must be at least 1",
        });
    }
    if mode == ConvMode::Submanifold {
        if kernel.iter().any(|&k| k % 2 == 0) {
            return Err(SparseError::InvalidKernel {
                kernel,
                reason: "submanifold mode requires odd kernel extents",
            });
        }
        if stride != [1, 1, 1] {
            return Err(SparseError::InvalidStride {
                stride,
                reason: "submanifold mode requires stride (1,1,1)",
            });
        }
    }
    Ok(())
}

/// Output extent along one axis: `ceil(extent / stride)`.
fn out_extent(extent: u32, stride: usize) -> u32 {
    extent.div_ceil(stride as u32)
}

/// Neighbour structure of a coordinate set, independent of feature values.
///
/// For every geometric output site and every kernel offset the table holds
/// the contributing input row (or nothing). Gating by the active-site mask
/// turns this into a [`Rulebook`]. A network stage builds its geometry once
/// per sample and re-gates it for every layer and timestep.
#[derive(Clone, Debug)]
pub struct ConvGeometry {
    mode: ConvMode,
    kernel: [usize; 3],
    stride: [usize; 3],
    offsets: Vec<[i32; 3]>,
    out_shape: SpatialShape,
    num_inputs: usize,
    input_fingerprint: u64,
    out_coords: Vec<VoxelCoord>,
    table: Vec<u32>,
}

impl ConvGeometry {
    pub fn new(
        input: &SparseVoxelTensor,
        kernel: [usize; 3],
        stride: [usize; 3],
        mode: ConvMode,
    ) -> Result<Self, SparseError> {
        validate(kernel, stride, mode)?;
        let offsets = kernel_offsets(kernel);
        let in_shape = input.spatial_shape();
        let (out_coords, out_shape) = match mode {
            ConvMode::Submanifold => (input.coords().to_vec(), in_shape),
            ConvMode::Strided => {
                let out_shape = [
                    out_extent(in_shape[0], stride[0]),
                    out_extent(in_shape[1], stride[1]),
                    out_extent(in_shape[2], stride[2]),
                ];
                (
                    strided_outputs(input.coords(), &offsets, stride, out_shape),
                    out_shape,
                )
            }
        };
        let ko = offsets.len();
        let mut table = vec![NONE; out_coords.len() * ko];
        for (g, p) in out_coords.iter().enumerate() {
            let base = [
                p.x * stride[0] as i32,
                p.y * stride[1] as i32,
                p.z * stride[2] as i32,
            ];
            for (k, off) in offsets.iter().enumerate() {
                let q = VoxelCoord::with_xyz(
                    p.batch,
                    [base[0] + off[0], base[1] + off[1], base[2] + off[2]],
                );
                if let Some(i) = input.lookup(&q) {
                    table[g * ko + k] = i as u32;
                }
            }
        }
        Ok(Self {
            mode,
            kernel,
            stride,
            offsets,
            out_shape,
            num_inputs: input.num_active(),
            input_fingerprint: input.fingerprint(),
            out_coords,
            table,
        })
    }

    pub fn mode(&self) -> ConvMode {
        self.mode
    }

    pub fn kernel(&self) -> [usize; 3] {
        self.kernel
    }

    /// Every output site reachable from a present input, ignoring activity.
    pub fn out_coords(&self) -> &[VoxelCoord] {
        &self.out_coords
    }

    pub fn out_shape(&self) -> SpatialShape {
        self.out_shape
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn input_fingerprint(&self) -> u64 {
        self.input_fingerprint
    }

    /// Restricts the geometry to active input rows. Returns the rulebook and,
    /// for each of its outputs, the index into [`Self::out_coords`].
    pub fn gate(&self, active: &[bool]) -> (Rulebook, Vec<u32>) {
        assert_eq!(active.len(), self.num_inputs, "activity mask length");
        let ko = self.offsets.len();
        let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); ko];
        let mut out_coords = Vec::new();
        let mut targets = Vec::new();
        let mut out_ptr = vec![0u32];
        let mut entries = Vec::new();
        for g in 0..self.out_coords.len() {
            let row = &self.table[g * ko..(g + 1) * ko];
            let include = match self.mode {
                ConvMode::Submanifold => active[g],
                ConvMode::Strided => row.iter().any(|&i| i != NONE && active[i as usize]),
            };
            if !include {
                continue;
            }
            let o = out_coords.len() as u32;
            for (k, &i) in row.iter().enumerate() {
                if i != NONE && active[i as usize] {
                    pairs[k].push((i, o));
                    entries.push((k as u32, i));
                }
            }
            out_ptr.push(entries.len() as u32);
            out_coords.push(self.out_coords[g]);
            targets.push(g as u32);
        }
        let rb = Rulebook {
            kernel: self.kernel,
            stride: self.stride,
            mode: self.mode,
            offsets: self.offsets.clone(),
            pairs,
            out_coords,
            out_shape: self.out_shape,
            num_inputs: self.num_inputs,
            input_fingerprint: self.input_fingerprint,
            out_ptr,
            entries,
        };
        (rb, targets)
    }
}

fn strided_outputs(
    coords: &[VoxelCoord],
    offsets: &[[i32; 3]],
    stride: [usize; 3],
    out_shape: SpatialShape,
) -> Vec<VoxelCoord> {
    let mut outs = Vec::with_capacity(coords.len());
    for q in coords {
        'offsets: for off in offsets {
            let mut p = [0i32; 3];
            for a in 0..3 {
                let num = q.xyz()[a] - off[a];
                let s = stride[a] as i32;
                if num < 0 || num % s != 0 {
                    continue 'offsets;
                }
                p[a] = num / s;
                if p[a] as u32 >= out_shape[a] {
                    continue 'offsets;
                }
            }
            outs.push(VoxelCoord::with_xyz(q.batch, p));
        }
    }
    outs.sort_unstable();
    outs.dedup();
    outs
}

/// Per-offset `(input_row, output_row)` pairs for one sparse convolution.
///
/// Pair lists are sorted by `(output_row, input_row)`. Each output row also
/// has its contributions listed in offset order, which is the accumulation
/// order of the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Rulebook {
    kernel: [usize; 3],
    stride: [usize; 3],
    mode: ConvMode,
    offsets: Vec<[i32; 3]>,
    pairs: Vec<Vec<(u32, u32)>>,
    out_coords: Vec<VoxelCoord>,
    out_shape: SpatialShape,
    num_inputs: usize,
    input_fingerprint: u64,
    out_ptr: Vec<u32>,
    entries: Vec<(u32, u32)>,
}

/// Builds the rulebook for `input`. A site counts as active when any of its
/// feature channels is nonzero; only active sites contribute or (in
/// submanifold mode) receive output.
pub fn build_rulebook(
    input: &SparseVoxelTensor,
    kernel: [usize; 3],
    stride: [usize; 3],
    mode: ConvMode,
) -> Result<Rulebook, SparseError> {
    let geom = ConvGeometry::new(input, kernel, stride, mode)?;
    Ok(geom.gate(&input.features().active_rows()).0)
}

impl Rulebook {
    pub fn kernel(&self) -> [usize; 3] {
        self.kernel
    }

    pub fn stride(&self) -> [usize; 3] {
        self.stride
    }

    pub fn mode(&self) -> ConvMode {
        self.mode
    }

    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    pub fn num_offsets(&self) -> usize {
        self.offsets.len()
    }

    pub fn pairs(&self, k: usize) -> &[(u32, u32)] {
        &self.pairs[k]
    }

    pub fn all_pairs(&self) -> &[Vec<(u32, u32)>] {
        &self.pairs
    }

    /// N_r: pair count summed over all offsets.
    pub fn total_pairs(&self) -> usize {
        self.entries.len()
    }

    pub fn out_coords(&self) -> &[VoxelCoord] {
        &self.out_coords
    }

    pub fn num_outputs(&self) -> usize {
        self.out_coords.len()
    }

    pub fn out_shape(&self) -> SpatialShape {
        self.out_shape
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn input_fingerprint(&self) -> u64 {
        self.input_fingerprint
    }

    /// `(offset, input_row)` contributions of output `o`, in offset order.
    #[inline]
    pub fn output_entries(&self, o: usize) -> &[(u32, u32)] {
        &self.entries[self.out_ptr[o] as usize..self.out_ptr[o + 1] as usize]
    }

    /// Input-major view: for each input row, its `(offset, output_row)`
    /// contributions in offset order.
    pub fn input_major(&self) -> (Vec<u32>, Vec<(u32, u32)>) {
        let mut counts = vec![0u32; self.num_inputs + 1];
        for &(_, i) in &self.entries {
            counts[i as usize + 1] += 1;
        }
        for r in 0..self.num_inputs {
            counts[r + 1] += counts[r];
        }
        let ptr = counts.clone();
        let mut fill = counts;
        let mut entries = vec![(0u32, 0u32); self.entries.len()];
        for (k, list) in self.pairs.iter().enumerate() {
            for &(i, o) in list {
                let slot = &mut fill[i as usize];
                entries[*slot as usize] = (k as u32, o);
                *slot += 1;
            }
        }
        (ptr, entries)
    }

    /// Geometric check of one pair: `input = output * stride + offset`.
    pub fn pair_is_consistent(&self, input_coords: &[VoxelCoord], k: usize, pair: (u32, u32)) -> bool {
        let (i, o) = pair;
        let (Some(q), Some(p)) = (input_coords.get(i as usize), self.out_coords.get(o as usize))
        else {
            return false;
        };
        let off = self.offsets[k];
        q.batch == p.batch
            && (0..3).all(|a| q.xyz()[a] == p.xyz()[a] * self.stride[a] as i32 + off[a])
    }
}
