//! Patch grid over `(T, C, H, W)` inputs and window masks with partially
//! visible masked windows.
//!
//! Patch tensors have shape `[T, G, n_h, n_w, c_p·p·p]`; inside a patch the
//! flattening order is (band within group, row, column), column fastest.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub p: usize,
    pub c_p: usize,
    pub groups: usize,
    pub n_h: usize,
    pub n_w: usize,
    /// `(frames, patch rows, patch columns)`.
    pub window: (usize, usize, usize),
}

fn divides(axis: &'static str, value: usize, divisor: usize) -> Result<usize> {
    if divisor == 0 || value % divisor != 0 {
        return Err(Error::Divisibility { axis, value, divisor });
    }
    Ok(value / divisor)
}

pub fn build_patch_grid(
    dims: (usize, usize, usize, usize),
    p: usize,
    c_p: usize,
    window: (usize, usize, usize),
) -> Result<PatchGrid> {
    let (t, c, h, w) = dims;
    if t == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("empty input dims {dims:?}")));
    }
    let n_h = divides("H", h, p)?;
    let n_w = divides("W", w, p)?;
    let groups = divides("C", c, c_p)?;
    if window.0 != t {
        return Err(Error::Config(format!(
            "window spans {} frames but inputs have T = {t}",
            window.0
        )));
    }
    divides("n_h", n_h, window.1)?;
    divides("n_w", n_w, window.2)?;
    Ok(PatchGrid {
        t,
        c,
        h,
        w,
        p,
        c_p,
        groups,
        n_h,
        n_w,
        window,
    })
}

impl PatchGrid {
    pub fn patch_dim(&self) -> usize {
        self.c_p * self.p * self.p
    }

    pub fn spatial_patches(&self) -> usize {
        self.n_h * self.n_w
    }

    pub fn num_patches(&self) -> usize {
        self.t * self.groups * self.spatial_patches()
    }

    /// Window grid `(rows, cols)`.
    pub fn window_grid(&self) -> (usize, usize) {
        (self.n_h / self.window.1, self.n_w / self.window.2)
    }

    pub fn num_windows(&self) -> usize {
        let (a, b) = self.window_grid();
        a * b
    }

    pub fn patch_tensor_shape(&self) -> [usize; 5] {
        [self.t, self.groups, self.n_h, self.n_w, self.patch_dim()]
    }

    /// Window containing spatial patch `(i, j)`.
    pub fn window_of(&self, i: usize, j: usize) -> usize {
        (i / self.window.1) * self.window_grid().1 + j / self.window.2
    }
}

/// Internally `true` means masked. `pimask_keep` marks positions inside masked
/// windows that stay visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub grid: PatchGrid,
    pub window_mask: Vec<bool>,
    pub pimask_keep: Vec<bool>,
    pub mask_ratio: f64,
    pub keep_fraction: f64,
    pub seed: u64,
}

pub fn sample_window_mask(grid: &PatchGrid, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {mask_ratio} outside (0, 1)")));
    }
    let n = grid.num_windows();
    let k = (mask_ratio * n as f64 + 1e-9).floor() as usize;
    let mut window_mask = vec![false; n];
    let mut r = rng::stream(seed, &[rng::label("window-mask")]);
    for i in sample_indices(&mut r, n, k) {
        window_mask[i] = true;
    }
    Ok(MaskPlan {
        grid: *grid,
        window_mask,
        pimask_keep: vec![false; grid.spatial_patches()],
        mask_ratio,
        keep_fraction: 0.0,
        seed,
    })
}

/// Leaves `floor(keep_fraction · w_h · w_w)` positions of each masked window
/// visible, drawn independently per window and shared by all frames and groups.
pub fn apply_pimask(plan: &MaskPlan, keep_fraction: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&keep_fraction) {
        return Err(Error::Config(format!("keep fraction {keep_fraction} outside [0, 1)")));
    }
    if plan.pimask_keep.iter().any(|&k| k) {
        return Err(Error::Invalid("mask plan already has visible exceptions".into()));
    }
    let g = &plan.grid;
    let (wh, ww) = (g.window.1, g.window.2);
    let per_window = (keep_fraction * (wh * ww) as f64 + 1e-9).floor() as usize;
    let mut out = plan.clone();
    out.keep_fraction = keep_fraction;
    if per_window == 0 {
        return Ok(out);
    }
    let (_, gw) = g.window_grid();
    for (win, _) in plan.window_mask.iter().enumerate().filter(|(_, &m)| m) {
        let (wy, wx) = (win / gw, win % gw);
        let mut r = rng::stream(seed, &[rng::label("pimask"), win as u64]);
        for local in sample_indices(&mut r, wh * ww, per_window) {
            let (i, j) = (wy * wh + local / ww, wx * ww + local % ww);
            out.pimask_keep[i * g.n_w + j] = true;
        }
    }
    Ok(out)
}

impl MaskPlan {
    pub fn all_visible(grid: &PatchGrid) -> Self {
        Self::constant(grid, false)
    }

    pub fn all_masked(grid: &PatchGrid) -> Self {
        Self::constant(grid, true)
    }

    fn constant(grid: &PatchGrid, masked: bool) -> Self {
        Self {
            grid: *grid,
            window_mask: vec![masked; grid.num_windows()],
            pimask_keep: vec![false; grid.spatial_patches()],
            mask_ratio: if masked { 1.0 } else { 0.0 },
            keep_fraction: 0.0,
            seed: 0,
        }
    }

    /// Window mask, then PIMask exceptions with the same seed.
    pub fn sample(grid: &PatchGrid, mask_ratio: f64, keep_fraction: f64, seed: u64) -> Result<Self> {
        apply_pimask(&sample_window_mask(grid, mask_ratio, seed)?, keep_fraction, seed)
    }

    /// `[n_h, n_w]`, true where the patch is hidden from the encoder.
    pub fn spatial_mask(&self) -> Vec<bool> {
        let g = &self.grid;
        (0..g.n_h)
            .flat_map(|i| (0..g.n_w).map(move |j| (i, j)))
            .map(|(i, j)| self.window_mask[g.window_of(i, j)] && !self.pimask_keep[i * g.n_w + j])
            .collect()
    }

    /// `[T, G, n_h, n_w]` broadcast of [`spatial_mask`](Self::spatial_mask).
    pub fn patch_mask(&self) -> Vec<bool> {
        let s = self.spatial_mask();
        let reps = self.grid.t * self.grid.groups;
        let mut out = Vec::with_capacity(reps * s.len());
        for _ in 0..reps {
            out.extend_from_slice(&s);
        }
        out
    }

    pub fn masked_windows(&self) -> usize {
        self.window_mask.iter().filter(|&&m| m).count()
    }
}

/// Zeroes masked patches; visible patches are copied bit for bit.
pub fn apply_mask<S: Scalar>(values: &Tensor<S>, plan: &MaskPlan) -> Result<Tensor<S>> {
    let g = &plan.grid;
    let shape = g.patch_tensor_shape();
    if values.shape() != shape {
        return Err(Error::Shape {
            expected: shape.to_vec(),
            actual: values.shape().to_vec(),
        });
    }
    let mask = plan.patch_mask();
    let mut out = values.clone();
    for (patch, &m) in out.data_mut().chunks_exact_mut(g.patch_dim()).zip(&mask) {
        if m {
            patch.fill(S::zero());
        }
    }
    Ok(out)
}

fn check_input<S: Scalar>(values: &Tensor<S>, g: &PatchGrid) -> Result<()> {
    let expected = [g.t, g.c, g.h, g.w];
    if values.shape() != expected {
        return Err(Error::Shape {
            expected: expected.to_vec(),
            actual: values.shape().to_vec(),
        });
    }
    Ok(())
}

/// Source offset in `[T, C, H, W]` for every element of the patch tensor.
pub fn patch_index(g: &PatchGrid) -> Vec<usize> {
    let mut idx = Vec::with_capacity(g.t * g.c * g.h * g.w);
    for t in 0..g.t {
        for grp in 0..g.groups {
            for i in 0..g.n_h {
                for j in 0..g.n_w {
                    for cc in 0..g.c_p {
                        let ch = grp * g.c_p + cc;
                        for r in 0..g.p {
                            let row = ((t * g.c + ch) * g.h + i * g.p + r) * g.w + j * g.p;
                            idx.extend(row..row + g.p);
                        }
                    }
                }
            }
        }
    }
    idx
}

pub fn patchify<S: Scalar>(values: &Tensor<S>, grid: &PatchGrid) -> Result<Tensor<S>> {
    check_input(values, grid)?;
    let src = values.data();
    let data = patch_index(grid).into_iter().map(|i| src[i]).collect();
    Tensor::from_vec(&grid.patch_tensor_shape(), data)
}

pub fn unpatchify<S: Scalar>(patches: &Tensor<S>, grid: &PatchGrid) -> Result<Tensor<S>> {
    let shape = grid.patch_tensor_shape();
    if patches.shape() != shape {
        return Err(Error::Shape {
            expected: shape.to_vec(),
            actual: patches.shape().to_vec(),
        });
    }
    let mut out = vec![S::zero(); patches.len()];
    for (&dst, &v) in patch_index(grid).iter().zip(patches.data()) {
        out[dst] = v;
    }
    Tensor::from_vec(&[grid.t, grid.c, grid.h, grid.w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;
    use std::collections::HashSet;

    fn grid64() -> PatchGrid {
        build_patch_grid((6, 6, 64, 64), 4, 2, (6, 8, 8)).unwrap()
    }

    #[test]
    fn grid_counts() {
        let g = build_patch_grid((6, 6, 512, 512), 4, 2, (6, 8, 8)).unwrap();
        assert_eq!((g.n_h, g.n_w, g.groups), (128, 128, 3));
        assert_eq!(g.num_windows(), 256);
        assert_eq!(g.num_patches(), 128 * 128 * 3 * 6);
        let g = grid64();
        assert_eq!((g.n_h, g.n_w, g.window_grid()), (16, 16, (2, 2)));
    }

    #[test]
    fn indivisible_patch_size_names_axis() {
        match build_patch_grid((6, 6, 512, 512), 5, 2, (6, 8, 8)) {
            Err(Error::Divisibility { axis, value, divisor }) => {
                assert_eq!((axis, value, divisor), ("H", 512, 5))
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            build_patch_grid((6, 5, 64, 64), 4, 2, (6, 8, 8)),
            Err(Error::Divisibility { axis: "C", .. })
        ));
    }

    #[test]
    fn masked_window_count() {
        let g = build_patch_grid((6, 6, 512, 512), 4, 2, (6, 8, 8)).unwrap();
        let plan = sample_window_mask(&g, 0.75, 3).unwrap();
        assert_eq!(plan.masked_windows(), 192);
        assert_eq!(plan, sample_window_mask(&g, 0.75, 3).unwrap());
        for bad in [0.0, 1.0, -0.2, 1.5] {
            assert!(sample_window_mask(&g, bad, 3).is_err());
        }
    }

    #[test]
    fn all_two_of_four_patterns_occur() {
        let g = grid64();
        let mut seen = HashSet::new();
        for seed in 0..500 {
            seen.insert(sample_window_mask(&g, 0.5, seed).unwrap().window_mask);
            if seen.len() == 6 {
                break;
            }
        }
        assert_eq!(seen.len(), 6);
        assert!(seen.iter().all(|m| m.iter().filter(|&&x| x).count() == 2));
    }

    #[test]
    fn pimask_counts() {
        let g = build_patch_grid((6, 6, 512, 512), 4, 2, (6, 8, 8)).unwrap();
        let base = sample_window_mask(&g, 0.75, 11).unwrap();
        let plan = apply_pimask(&base, 0.25, 11).unwrap();
        let (_, gw) = g.window_grid();
        let mut per_window = vec![0usize; g.num_windows()];
        for i in 0..g.n_h {
            for j in 0..g.n_w {
                if plan.pimask_keep[i * g.n_w + j] {
                    per_window[(i / 8) * gw + j / 8] += 1;
                }
            }
        }
        for (w, &n) in per_window.iter().enumerate() {
            assert_eq!(n, if plan.window_mask[w] { 16 } else { 0 });
        }
        let masked = plan.patch_mask().iter().filter(|&&m| m).count();
        assert_eq!(masked, 192 * (64 - 16) * 6 * 3);
        assert_eq!(apply_pimask(&base, 0.0, 11).unwrap().pimask_keep, base.pimask_keep);
        assert!(apply_pimask(&base, 1.0, 11).is_err());
        assert!(apply_pimask(&plan, 0.25, 11).is_err());
    }

    #[test]
    fn apply_mask_matches_loop_reference() {
        let g = build_patch_grid((6, 6, 32, 32), 2, 2, (6, 4, 4)).unwrap();
        assert_eq!((g.n_h, g.n_w), (16, 16));
        let plan = MaskPlan::sample(&g, 0.75, 0.25, 5).unwrap();
        let mut r = rng::rng(1);
        let x = Tensor::<f64>::from_fn(&g.patch_tensor_shape(), |_| r.random());
        let y = apply_mask(&x, &plan).unwrap();
        let d = g.patch_dim();
        for t in 0..g.t {
            for grp in 0..g.groups {
                for i in 0..g.n_h {
                    for j in 0..g.n_w {
                        let masked_window = plan.window_mask[(i / 4) * 4 + j / 4];
                        let visible = !masked_window || plan.pimask_keep[i * g.n_w + j];
                        let m = if visible { 1.0 } else { 0.0 };
                        let base = (((t * g.groups + grp) * g.n_h + i) * g.n_w + j) * d;
                        for k in 0..d {
                            assert_eq!(y.data()[base + k], m * x.data()[base + k]);
                        }
                    }
                }
            }
        }
        assert_eq!(apply_mask(&x, &MaskPlan::all_visible(&g)).unwrap(), x);
        assert!(apply_mask(&x, &MaskPlan::all_masked(&g)).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(apply_mask(&Tensor::<f64>::zeros(&[3]), &plan).is_err());
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let g = build_patch_grid((1, 2, 4, 4), 4, 2, (1, 1, 1)).unwrap();
        let x = Tensor::<f32>::from_fn(&[1, 2, 4, 4], |i| i as f32);
        let p = patchify(&x, &g).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1, 1, 32]);
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn patch_equals_slice() {
        let g = grid64();
        let mut r = rng::rng(2);
        let x = Tensor::<f32>::from_fn(&[6, 6, 64, 64], |_| r.random());
        let p = patchify(&x, &g).unwrap();
        for _ in 0..50 {
            let (t, grp, i, j) = (
                r.random_range(0..6),
                r.random_range(0..3),
                r.random_range(0..16),
                r.random_range(0..16),
            );
            let mut slice = Vec::new();
            for ch in grp * 2..grp * 2 + 2 {
                for y in i * 4..i * 4 + 4 {
                    for xx in j * 4..j * 4 + 4 {
                        slice.push(x.data()[((t * 6 + ch) * 64 + y) * 64 + xx]);
                    }
                }
            }
            let base = (((t * 3 + grp) * 16 + i) * 16 + j) * 32;
            assert_eq!(&p.data()[base..base + 32], &slice[..]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn patchify_round_trip(seed in any::<u64>(), t in 1usize..4, cg in 1usize..4, nh in 1usize..5, nw in 1usize..5, p in 1usize..4) {
            let g = build_patch_grid((t, cg * 2, nh * p, nw * p), p, 2, (t, 1, 1)).unwrap();
            let mut r = rng::rng(seed);
            let x = Tensor::<f32>::from_fn(&[t, cg * 2, nh * p, nw * p], |_| r.random());
            let back = unpatchify(&patchify(&x, &g).unwrap(), &g).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn mask_counts_follow_floor_formulas(
            wy in 1usize..6, wx in 1usize..6, wh in 1usize..6, ww in 1usize..6,
            ratio in 0.05f64..0.95, keep in 0.0f64..0.9, seed in any::<u64>(),
        ) {
            let g = build_patch_grid((2, 4, wy * wh * 2, wx * ww * 2), 2, 2, (2, wh, ww)).unwrap();
            let k = (ratio * (wy * wx) as f64 + 1e-9).floor() as usize;
            if k == 0 {
                return Ok(());
            }
            let plan = MaskPlan::sample(&g, ratio, keep, seed).unwrap();
            prop_assert_eq!(plan.masked_windows(), k);
            let keep_each = (keep * (wh * ww) as f64 + 1e-9).floor() as usize;
            prop_assert_eq!(plan.pimask_keep.iter().filter(|&&v| v).count(), k * keep_each);
            let pm = plan.patch_mask();
            let s = g.spatial_patches();
            for rep in pm.chunks_exact(s) {
                prop_assert_eq!(rep, &pm[..s]);
            }
            prop_assert_eq!(pm[..s].iter().filter(|&&m| m).count(), k * (wh * ww - keep_each));
        }
    }
}
