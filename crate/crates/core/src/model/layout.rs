//! Row maps and attention layouts for a batch. Token rows are ordered
//! `(sample, frame, group, row, col)` at every stage.

use std::sync::Arc;

use super::config::{ModelConfig, StageGeometry, STAGES};
use crate::autodiff::{AttentionSpec, RowMap, MASKED_SCORE};
use crate::error::Result;
use crate::scalar::Scalar;

pub struct WindowLayout<S> {
    pub gather: Arc<RowMap<S>>,
    pub scatter: Arc<RowMap<S>>,
    pub spec: Arc<AttentionSpec<S>>,
}

pub struct StageLayout<S> {
    pub geom: StageGeometry,
    /// Index 0 for even blocks, 1 for odd (shifted) blocks.
    pub windows: [Arc<WindowLayout<S>>; 2],
    pub temporal: WindowLayout<S>,
    /// `[rows · k², ·]` neighbourhood gather for the convolution, zero padded.
    pub conv: Arc<RowMap<S>>,
    /// 2×2 neighbourhood gather feeding the following merge.
    pub merge: Option<Arc<RowMap<S>>>,
}

pub struct Layout<S> {
    pub batch: usize,
    pub stages: Vec<StageLayout<S>>,
    /// Maps decoder pixel-row segments to `[B, T, C, H, W]` order.
    pub decoder: Arc<RowMap<S>>,
}

/// Relative-position bias index for a `wh × ww` window.
pub fn relative_position_index(wh: usize, ww: usize) -> Vec<u32> {
    let l = wh * ww;
    let mut idx = Vec::with_capacity(l * l);
    for a in 0..l {
        for b in 0..l {
            let (ra, ca, rb, cb) = (a / ww, a % ww, b / ww, b % ww);
            let dr = ra + wh - 1 - rb;
            let dc = ca + ww - 1 - cb;
            idx.push((dr * (2 * ww - 1) + dc) as u32);
        }
    }
    idx
}

fn region(pos: usize, extent: usize, win: usize, shift: usize) -> usize {
    if pos < extent - win {
        0
    } else if pos < extent - shift {
        1
    } else {
        2
    }
}

/// Additive masks `[windows, L, L]` that stop tokens brought together by the
/// cyclic shift from attending to each other.
pub fn shifted_window_mask<S: Scalar>(g: &StageGeometry) -> Vec<S> {
    let (nwh, nww) = (g.h / g.win_h, g.w / g.win_w);
    let l = g.win_h * g.win_w;
    let mut mask = Vec::with_capacity(nwh * nww * l * l);
    for wy in 0..nwh {
        for wx in 0..nww {
            let labels: Vec<usize> = (0..l)
                .map(|k| {
                    let y = wy * g.win_h + k / g.win_w;
                    let x = wx * g.win_w + k % g.win_w;
                    let ry = if g.shift_h > 0 { region(y, g.h, g.win_h, g.shift_h) } else { 0 };
                    let rx = if g.shift_w > 0 { region(x, g.w, g.win_w, g.shift_w) } else { 0 };
                    ry * 3 + rx
                })
                .collect();
            for a in 0..l {
                for b in 0..l {
                    mask.push(if labels[a] == labels[b] { S::zero() } else { S::lit(MASKED_SCORE) });
                }
            }
        }
    }
    mask
}

/// Source row for each windowed row `(frame, wy, wx, r, c)` after rolling the
/// grid by `-shift`.
pub fn window_order(frames: usize, g: &StageGeometry, shifted: bool) -> Vec<usize> {
    let (sh, sw) = if shifted { (g.shift_h, g.shift_w) } else { (0, 0) };
    let hw = g.h * g.w;
    let mut out = Vec::with_capacity(frames * hw);
    for f in 0..frames {
        for wy in 0..g.h / g.win_h {
            for wx in 0..g.w / g.win_w {
                for r in 0..g.win_h {
                    for c in 0..g.win_w {
                        let y = (wy * g.win_h + r + sh) % g.h;
                        let x = (wx * g.win_w + c + sw) % g.w;
                        out.push(f * hw + y * g.w + x);
                    }
                }
            }
        }
    }
    out
}

fn window_layout<S: Scalar>(frames: usize, g: &StageGeometry, shifted: bool) -> WindowLayout<S> {
    let gather = RowMap::permutation(&window_order(frames, g, shifted));
    let scatter = gather.inverse_permutation();
    let needs_mask = shifted && (g.shift_h > 0 || g.shift_w > 0);
    WindowLayout {
        gather: Arc::new(gather),
        scatter: Arc::new(scatter),
        spec: Arc::new(AttentionSpec {
            group_len: g.win_h * g.win_w,
            heads: g.heads,
            head_dim: g.dim / g.heads,
            bias_index: Some(relative_position_index(g.win_h, g.win_w)),
            mask: needs_mask.then(|| shifted_window_mask(g)),
        }),
    }
}

/// Rows regrouped as `(sample, group, position, frame)`.
fn temporal_layout<S: Scalar>(batch: usize, t: usize, groups: usize, g: &StageGeometry) -> WindowLayout<S> {
    let hw = g.h * g.w;
    let mut order = Vec::with_capacity(batch * t * groups * hw);
    for b in 0..batch {
        for grp in 0..groups {
            for pos in 0..hw {
                for f in 0..t {
                    order.push(((b * t + f) * groups + grp) * hw + pos);
                }
            }
        }
    }
    let gather = RowMap::permutation(&order);
    let scatter = gather.inverse_permutation();
    let bias_index = (0..t)
        .flat_map(|a| (0..t).map(move |b| (a + t - 1 - b) as u32))
        .collect();
    WindowLayout {
        gather: Arc::new(gather),
        scatter: Arc::new(scatter),
        spec: Arc::new(AttentionSpec {
            group_len: t,
            heads: g.heads,
            head_dim: g.dim / g.heads,
            bias_index: Some(bias_index),
            mask: None,
        }),
    }
}

/// `k × k` neighbourhoods per token, row-major over offsets, `None` outside the grid.
fn conv_gather<S: Scalar>(frames: usize, g: &StageGeometry, k: usize) -> RowMap<S> {
    let r = (k / 2) as isize;
    let hw = g.h * g.w;
    let (h, w) = (g.h as isize, g.w as isize);
    let src = (0..frames).flat_map(move |f| {
        (0..hw).flat_map(move |pos| {
            let (y, x) = ((pos / g.w) as isize, (pos % g.w) as isize);
            (0..k as isize).flat_map(move |dy| {
                (0..k as isize).map(move |dx| {
                    let (yy, xx) = (y + dy - r, x + dx - r);
                    (yy >= 0 && yy < h && xx >= 0 && xx < w).then(|| f * hw + (yy * w + xx) as usize)
                })
            })
        })
    });
    RowMap::gather(frames * hw, src)
}

/// 2×2 neighbours of each merged token in the order (0,0), (1,0), (0,1), (1,1).
fn merge_gather<S: Scalar>(frames: usize, g: &StageGeometry) -> RowMap<S> {
    let hw = g.h * g.w;
    let (oh, ow) = (g.h / 2, g.w / 2);
    let src = (0..frames).flat_map(move |f| {
        (0..oh * ow).flat_map(move |pos| {
            let (i, j) = (pos / ow, pos % ow);
            [(0, 0), (1, 0), (0, 1), (1, 1)]
                .into_iter()
                .map(move |(dy, dx)| Some(f * hw + (2 * i + dy) * g.w + 2 * j + dx))
        })
    });
    RowMap::gather(frames * hw, src)
}

/// Decoder rows are pixel segments `(b, t, g, I, J, band, y)` of width `block`;
/// the image is rows `(b, t, c, Y, J)` of the same width.
fn decoder_order<S: Scalar>(cfg: &ModelConfig, batch: usize, h4: usize, w4: usize) -> RowMap<S> {
    let (t, groups, cp) = (cfg.frames, cfg.groups(), cfg.spectral_group);
    let block = cfg.decoder_block();
    let c = cfg.channels;
    let mut order = Vec::with_capacity(batch * t * c * h4 * block * w4);
    for b in 0..batch {
        for f in 0..t {
            for ch in 0..c {
                let (grp, band) = (ch / cp, ch % cp);
                for yy in 0..h4 * block {
                    let (ti, y) = (yy / block, yy % block);
                    for tj in 0..w4 {
                        let token = (((b * t + f) * groups + grp) * h4 + ti) * w4 + tj;
                        order.push((token * cp + band) * block + y);
                    }
                }
            }
        }
    }
    RowMap::permutation(&order)
}

impl<S: Scalar> Layout<S> {
    pub fn new(cfg: &ModelConfig, batch: usize) -> Result<Self> {
        cfg.validate()?;
        let frames = batch * cfg.frames * cfg.groups();
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let geom = cfg.stage(s)?;
            let plain = Arc::new(window_layout(frames, &geom, false));
            let shifted = if geom.shift_h > 0 || geom.shift_w > 0 {
                Arc::new(window_layout(frames, &geom, true))
            } else {
                plain.clone()
            };
            stages.push(StageLayout {
                geom,
                windows: [plain, shifted],
                temporal: temporal_layout(batch, cfg.frames, cfg.groups(), &geom),
                conv: Arc::new(conv_gather(frames, &geom, cfg.hf_kernel)),
                merge: (s + 1 < STAGES).then(|| Arc::new(merge_gather(frames, &geom))),
            });
        }
        let last = stages[STAGES - 1].geom;
        Ok(Self {
            batch,
            stages,
            decoder: Arc::new(decoder_order(cfg, batch, last.h, last.w)),
        })
    }
}
