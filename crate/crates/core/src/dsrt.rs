//! Dynamic shifted regional transformer.
//!
//! Every query cell `(h, w)` of a feature grid splits the grid into four
//! rectangles anchored at the query (top-left, top-right, bottom-left,
//! bottom-right; row `h` and column `w` are shared). Each rectangle is
//! summarised into one token by a small window-attention block seeded with a
//! learnable region token, and the query then attends over its four tokens.
//!
//! The layer evaluates all `grid_h * grid_w * 4` regions at once by flattening
//! every region's cells into one ragged token matrix.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, LayerNorm, Linear, ParamId, ParamStore, Tensor, LN_EPS};

pub const REGION_COUNT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsrtConfig {
    pub heads: usize,
    /// Channel width of the feature map; each head sees `dim / heads`.
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl DsrtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Argument(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Argument("grid extents must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Inclusive row/column bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Rect {
    pub fn len(&self) -> usize {
        (self.r1 - self.r0 + 1) * (self.c1 - self.c0 + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..=self.r1).contains(&r) && (self.c0..=self.c1).contains(&c)
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.r0..=self.r1).flat_map(move |r| (self.c0..=self.c1).map(move |c| (r, c)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    pub query: (usize, usize),
    pub regions: [Rect; REGION_COUNT],
}

pub fn partition_regions(h: usize, w: usize, grid_h: usize, grid_w: usize) -> Result<RegionPartition> {
    if h >= grid_h || w >= grid_w {
        return Err(Error::Argument(format!(
            "query ({h}, {w}) outside {grid_h}x{grid_w} grid"
        )));
    }
    let (hl, wl) = (grid_h - 1, grid_w - 1);
    Ok(RegionPartition {
        query: (h, w),
        regions: [
            Rect { r0: 0, r1: h, c0: 0, c1: w },
            Rect { r0: 0, r1: h, c0: w, c1: wl },
            Rect { r0: h, r1: hl, c0: 0, c1: w },
            Rect { r0: h, r1: hl, c0: w, c1: wl },
        ],
    })
}

/// Query-driven attention over region tokens. `queries` is `[heads, N, dim]`,
/// `keys`/`values` are `[heads, N, R, dim]`. Returns the aggregated
/// `[heads, N, dim]` and the `[heads, N, R]` attention weights.
pub fn region_attend(queries: &Tensor, keys: &Tensor, values: &Tensor) -> Result<(Tensor, Tensor)> {
    let (qs, ks) = (queries.shape(), keys.shape());
    if qs.len() != 3 || ks.len() != 4 || ks[..2] != qs[..2] || ks[3] != qs[2] || values.shape() != ks {
        return Err(Error::Dimension(format!(
            "region aggregation needs [head,N,dim] and [head,N,R,dim], got {qs:?}, {ks:?} and {:?}",
            values.shape()
        )));
    }
    let (heads, n, r, dim) = (ks[0], ks[1], ks[2], ks[3]);
    let scores = queries
        .reshape(&[heads, n, 1, dim])?
        .mul(keys)?
        .sum_axis(3, false)?
        .scale(1.0 / (dim as f64).sqrt())?;
    let attn = scores.softmax(2)?;
    let out = attn
        .reshape(&[heads, n, r, 1])?
        .mul(values)?
        .sum_axis(2, false)?;
    Ok((out, attn))
}

/// Aggregation with keys and values both equal to the region tokens.
pub fn region_aggregate(queries: &Tensor, region_tokens: &Tensor) -> Result<(Tensor, Tensor)> {
    region_attend(queries, region_tokens, region_tokens)
}

/// Window attention that condenses one region into its token.
///
/// The region token attends over the embedded cells (pre-norm attention with
/// a residual) followed by one pre-norm feed-forward block.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub cls: ParamId,
    pub pos: ParamId,
    pub embed: Linear,
    pub norm_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub width: usize,
    pub max_cells: usize,
}

impl WindowAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, width: usize, max_cells: usize) -> Result<Self> {
        let bound = 1.0 / (width as f64).sqrt();
        let cls_init = (0..REGION_COUNT * width)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let cls = store.add(format!("{name}.cls"), &[REGION_COUNT, width], cls_init)?;
        let pos = store.add(
            format!("{name}.pos"),
            &[max_cells + 1, width],
            vec![0.0; (max_cells + 1) * width],
        )?;
        Ok(WindowAttention {
            cls,
            pos,
            embed: Linear::new(store, rng, &format!("{name}.embed"), width, width)?,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width)?,
            q: Linear::new(store, rng, &format!("{name}.q"), width, width)?,
            k: Linear::new(store, rng, &format!("{name}.k"), width, width)?,
            v: Linear::new(store, rng, &format!("{name}.v"), width, width)?,
            o: Linear::new(store, rng, &format!("{name}.o"), width, width)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), width)?,
            ffn_in: Linear::new(store, rng, &format!("{name}.ffn_in"), width, 2 * width)?,
            ffn_out: Linear::new(store, rng, &format!("{name}.ffn_out"), 2 * width, width)?,
            width,
            max_cells,
        })
    }

    /// Region token `[width]` for cells `[n, width]` of region `g` (0-based),
    /// plus the `[n]` attention weights of the token over the cells.
    pub fn forward_region(&self, p: &Bound, cells: &Tensor, g: usize) -> Result<(Tensor, Tensor)> {
        let n = cells.shape()[0];
        if cells.rank() != 2 || cells.shape()[1] != self.width || n > self.max_cells || g >= REGION_COUNT {
            return Err(Error::Dimension(format!(
                "region of shape {:?} for width {} and at most {} cells",
                cells.shape(),
                self.width,
                self.max_cells
            )));
        }
        let cls = p.get(self.cls).narrow(0, g, 1)?;
        let seq = Tensor::concat(&[&cls, cells], 0)?.add(&p.get(self.pos).narrow(0, 0, n + 1)?)?;
        let seq = self.embed.forward(p, &seq)?;
        let normed = self.norm_attn.forward_rows(p, &seq)?;
        let q = self.q.forward(p, &normed.narrow(0, 0, 1)?)?;
        let body = normed.narrow(0, 1, n)?;
        let k = self.k.forward(p, &body)?;
        let v = self.v.forward(p, &body)?;
        let scores = q.matmul(&k.t()?)?.scale(1.0 / (self.width as f64).sqrt())?;
        let attn = scores.softmax(1)?;
        let mixed = self.o.forward(p, &attn.matmul(&v)?)?;
        let token = seq.narrow(0, 0, 1)?.add(&mixed)?;
        let token = token.add(&self.feed_forward(p, &token)?)?;
        Ok((token.reshape(&[self.width])?, attn.reshape(&[n])?))
    }

    fn feed_forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let h = self.ffn_in.forward(p, &self.norm_ffn.forward_rows(p, x)?)?.gelu()?;
        Ok(self.ffn_out.forward(p, &h)?)
    }
}

/// Flattened index plan for every (head, query, region) segment of a grid.
struct Plan {
    /// Row of the head-split cell matrix feeding each token.
    cell_rows: Rc<Vec<usize>>,
    /// Positional slot (1-based; slot 0 is the region token) of each token.
    slots: Rc<Vec<usize>>,
    /// Region index of each segment.
    segment_region: Rc<Vec<usize>>,
    offsets: Rc<Vec<usize>>,
}

impl Plan {
    fn new(cfg: &DsrtConfig) -> Result<Plan> {
        let n = cfg.cells();
        let per_head: usize = (cfg.grid_h + 1) * (cfg.grid_w + 1) * n;
        let total = per_head * cfg.heads;
        let mut cell_rows = Vec::with_capacity(total);
        let mut slots = Vec::with_capacity(total);
        let mut segment_region = Vec::with_capacity(n * REGION_COUNT * cfg.heads);
        let mut offsets = vec![0];
        for head in 0..cfg.heads {
            for h in 0..cfg.grid_h {
                for w in 0..cfg.grid_w {
                    let part = partition_regions(h, w, cfg.grid_h, cfg.grid_w)?;
                    for (g, rect) in part.regions.iter().enumerate() {
                        for (slot, (r, c)) in rect.cells().enumerate() {
                            cell_rows.push(head * n + r * cfg.grid_w + c);
                            slots.push(slot + 1);
                        }
                        segment_region.push(g);
                        offsets.push(cell_rows.len());
                    }
                }
            }
        }
        debug_assert_eq!(cell_rows.len(), total);
        Ok(Plan {
            cell_rows: Rc::new(cell_rows),
            slots: Rc::new(slots),
            segment_region: Rc::new(segment_region),
            offsets: Rc::new(offsets),
        })
    }
}

/// Diagnostics of one layer evaluation.
#[derive(Clone, Debug)]
pub struct DsrtTrace {
    /// Window attention weights over all tokens, ragged by segment.
    pub window_attention: Tensor,
    /// Aggregator weights `[heads, N, 4]`.
    pub region_attention: Tensor,
}

#[derive(Clone, Debug)]
pub struct DsrtLayer {
    pub cfg: DsrtConfig,
    pub window: WindowAttention,
    pub agg_q: Linear,
    pub agg_k: Linear,
    pub agg_v: Linear,
    pub mix: Linear,
}

impl DsrtLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: DsrtConfig) -> Result<Self> {
        cfg.validate()?;
        let hd = cfg.head_dim();
        Ok(DsrtLayer {
            cfg,
            window: WindowAttention::new(store, rng, &format!("{name}.window"), hd, cfg.cells())?,
            agg_q: Linear::new(store, rng, &format!("{name}.agg_q"), hd, hd)?,
            agg_k: Linear::new(store, rng, &format!("{name}.agg_k"), hd, hd)?,
            agg_v: Linear::new(store, rng, &format!("{name}.agg_v"), hd, hd)?,
            mix: Linear::new(store, rng, &format!("{name}.mix"), cfg.dim, cfg.dim)?,
        })
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(p, x)?.0)
    }

    /// Splits a `(C, H, W)` map into the `[heads * N, head_dim]` cell matrix.
    pub fn head_cells(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        if x.shape() != [c.dim, c.grid_h, c.grid_w] {
            return Err(Error::Dimension(format!(
                "regional transformer configured for ({}, {}, {}) got {:?}",
                c.dim,
                c.grid_h,
                c.grid_w,
                x.shape()
            )));
        }
        let n = c.cells();
        let hd = c.head_dim();
        Ok(x.reshape(&[c.heads, hd, n])?
            .permute(&[0, 2, 1])?
            .reshape(&[c.heads * n, hd])?)
    }

    pub fn forward_traced(&self, p: &Bound, x: &Tensor) -> Result<(Tensor, DsrtTrace)> {
        let c = self.cfg;
        let (n, hd) = (c.cells(), c.head_dim());
        let cells = self.head_cells(x)?;
        let plan = Plan::new(&c)?;
        let wa = &self.window;

        // The embedding is affine, so embed cells and slots once and gather.
        let w_embed = p.get(wa.embed.w);
        let cells_e = cells.matmul(w_embed)?;
        let pos = p.get(wa.pos);
        let pos_e = wa.embed.forward(p, pos)?;
        let tokens = cells_e
            .gather_rows(&plan.cell_rows)?
            .add(&pos_e.gather_rows(&plan.slots)?)?;
        let z = tokens.normalize(1, LN_EPS)?;

        // Region tokens only depend on the region index before attention.
        let cls = p.get(wa.cls).add(&pos.narrow(0, 0, 1)?)?;
        let cls = wa.embed.forward(p, &cls)?;
        let q = wa.q.forward(p, &wa.norm_attn.forward_rows(p, &cls)?)?;

        // Keys are affine in the normalised tokens: fold the key map and the
        // norm gain into the query. Terms constant within a segment cancel in
        // the softmax.
        let (gamma, beta) = (p.get(wa.norm_attn.gamma), p.get(wa.norm_attn.beta));
        let q_eff = q
            .matmul(&p.get(wa.k.w).t()?)?
            .mul(gamma)?
            .scale(1.0 / (hd as f64).sqrt())?;
        // Weights sum to one per segment, so the norm affine and the value
        // map apply after pooling.
        let (z_bar, attn) = z.segment_attend(&q_eff, &plan.segment_region, &plan.offsets)?;
        let pooled = wa.v.forward(p, &z_bar.mul(gamma)?.add(beta)?)?;
        let region = cls
            .gather_rows(&plan.segment_region)?
            .add(&wa.o.forward(p, &pooled)?)?;
        let region = region.add(&wa.feed_forward(p, &region)?)?;

        let keys = self.agg_k.forward(p, &region)?.reshape(&[c.heads, n, REGION_COUNT, hd])?;
        let values = self.agg_v.forward(p, &region)?.reshape(&[c.heads, n, REGION_COUNT, hd])?;
        let queries = self.agg_q.forward(p, &cells)?.reshape(&[c.heads, n, hd])?;
        let (agg, region_attention) = region_attend(&queries, &keys, &values)?;
        let merged = agg.permute(&[1, 0, 2])?.reshape(&[n, c.dim])?;
        let out = self
            .mix
            .forward(p, &merged)?
            .t()?
            .reshape(&[c.dim, c.grid_h, c.grid_w])?;
        Ok((
            out,
            DsrtTrace {
                window_attention: attn,
                region_attention,
            },
        ))
    }
}
