//! Single-modality temporo-spatial vision transformer.
//!
//! Pipeline for `X ∈ R^{T×H×W×C}`:
//!
//! 1. split into non-overlapping `t×h×w` patches, flattened per patch,
//!    laid out as `[N_H·N_W, N_T, t·h·w·C]`;
//! 2. project to `d`, add the temporal position row of each acquisition day,
//!    prepend `K` class tokens: `[N_H·N_W, K + N_T, d]`;
//! 3. temporal encoder, keep the `K` class tokens: `[N_H·N_W, K, d]`;
//! 4. transpose to `[K, N_H·N_W, d]`, add the spatial position table,
//!    spatial encoder;
//! 5. project each class token to `h·w` pixels, rearrange to `H×W×K`,
//!    softmax over classes.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SitsSample;
use crate::data::MAX_DAY_OF_YEAR;
use crate::error::{Error, Result};
use crate::nn::{AttentionMode, EncoderLayerParams, Linear};
use crate::params::{init, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const CLASS_TOKEN_STD: f64 = 0.02;
pub const POSITION_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub channels: usize,
}

impl TokenizerConfig {
    pub fn patch_len(&self) -> usize {
        self.t * self.h * self.w * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t", self.t), ("h", self.h), ("w", self.w), ("d", self.d), ("C", self.channels)] {
            if v == 0 {
                return Err(Error::Config(format!("tokenizer {name} must be ≥ 1")));
            }
        }
        Ok(())
    }

    /// `(N_T, N_H, N_W)`; every extent must divide exactly.
    pub fn grid(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        for (axis, n, p) in [("T", t, self.t), ("H", h, self.h), ("W", w, self.w)] {
            if n == 0 || n % p != 0 {
                return Err(Error::Config(format!(
                    "axis {axis} of extent {n} is not divisible by patch size {p}"
                )));
            }
        }
        Ok((t / self.t, h / self.h, w / self.w))
    }
}

/// `[T, H, W, C] → [N_H·N_W, N_T, t·h·w·C]`.
///
/// Patches are ordered row-major over (patch row, patch column), time-major
/// along the second axis; each patch vector is ordered `(dt, dy, dx, c)`.
pub fn patchify<S: Scalar>(x: &Tensor<S>, cfg: &TokenizerConfig) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 4 || s[3] != cfg.channels {
        return Err(Error::dim(
            "patchify",
            format!("expected [T, H, W, {}], got {:?}", cfg.channels, s),
        ));
    }
    let (nt, nh, nw) = cfg.grid(s[0], s[1], s[2])?;
    let x = x
        .clone()
        .reshaped(vec![nt, cfg.t, nh, cfg.h, nw, cfg.w, cfg.channels])?;
    // (nh, nw, nt, t, h, w, c)
    let p = x.permuted(&[2, 4, 0, 1, 3, 5, 6])?;
    p.reshaped(vec![nh * nw, nt, cfg.patch_len()])
}

/// Inverse of [`patchify`] for an image of extent `(T, H, W)`.
pub fn unpatchify<S: Scalar>(
    patches: &Tensor<S>,
    cfg: &TokenizerConfig,
    (t, h, w): (usize, usize, usize),
) -> Result<Tensor<S>> {
    let (nt, nh, nw) = cfg.grid(t, h, w)?;
    if patches.shape() != [nh * nw, nt, cfg.patch_len()] {
        return Err(Error::dim(
            "unpatchify",
            format!("patches {:?} do not tile a {t}×{h}×{w} image", patches.shape()),
        ));
    }
    let p = patches
        .clone()
        .reshaped(vec![nh, nw, nt, cfg.t, cfg.h, cfg.w, cfg.channels])?;
    // back to (nt, t, nh, h, nw, w, c)
    let x = p.permuted(&[2, 3, 0, 4, 1, 5, 6])?;
    x.reshaped(vec![t, h, w, cfg.channels])
}

/// Hyperparameters shared by every temporal branch and the spatial stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsvitConfig {
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub temporal_depth: usize,
    pub spatial_depth: usize,
    pub num_classes: usize,
    /// Input grid the spatial position table is sized for.
    pub height: usize,
    pub width: usize,
}

impl TsvitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("number of classes must be ≥ 1".into()));
        }
        if self.temporal_depth == 0 || self.spatial_depth == 0 {
            return Err(Error::Config("encoder depths must be ≥ 1".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "token dimension {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be ≥ 1".into()));
        }
        self.tokenizer(1).validate()?;
        self.tokenizer(1).grid(self.patch_t, self.height, self.width)?;
        Ok(())
    }

    pub fn tokenizer(&self, channels: usize) -> TokenizerConfig {
        TokenizerConfig {
            t: self.patch_t,
            h: self.patch_h,
            w: self.patch_w,
            d: self.dim,
            channels,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_h) * (self.width / self.patch_w)
    }
}

/// Tokenizer, temporal position table and temporal encoder of one input
/// stream, plus the class-token set it prepends.
#[derive(Clone, Debug)]
pub struct TemporalBranch {
    pub tokenizer: TokenizerConfig,
    pub projection: Linear,
    /// `366 × d`, row `doy - 1`.
    pub temporal_pos: ParamId,
    /// `K × d`; one set shared by every branch of a model.
    pub class_tokens: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    pub num_classes: usize,
}

/// Adds the `K × d` class-token set, named `class_tokens`.
pub fn new_class_tokens<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, cfg: &TsvitConfig) -> ParamId {
    store.add("class_tokens", init::normal(rng, CLASS_TOKEN_STD, &[cfg.num_classes, cfg.dim]))
}

impl TemporalBranch {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &TsvitConfig,
        channels: usize,
        class_tokens: ParamId,
    ) -> Result<Self> {
        let tokenizer = cfg.tokenizer(channels);
        tokenizer.validate()?;
        let d = cfg.dim;
        let projection = Linear::new(store, rng, &format!("{name}.tokenizer"), tokenizer.patch_len(), d, true);
        let temporal_pos = store.add(
            format!("{name}.temporal_pos"),
            init::normal(rng, POSITION_STD, &[MAX_DAY_OF_YEAR as usize, d]),
        );
        let layers = (0..cfg.temporal_depth)
            .map(|l| EncoderLayerParams::new(store, rng, &format!("{name}.temporal.{l}"), d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            tokenizer,
            projection,
            temporal_pos,
            class_tokens,
            layers,
            num_classes: cfg.num_classes,
        })
    }

    /// Dates indexing the temporal table: one per temporal patch, taken from
    /// the patch's first frame.
    pub fn patch_dates(&self, dates: &[u16]) -> Vec<u16> {
        dates.iter().step_by(self.tokenizer.t).copied().collect()
    }

    /// `Z_T0 = concat(Z_cls, Z_T + P_T[dates])`, `[N, K + N_T, d]`.
    pub fn embed_and_prepend<'t, S: Scalar>(
        &self,
        g: &Bound<'t, S>,
        patches: Tensor<S>,
        dates: &[u16],
    ) -> Result<Var<'t, S>> {
        let s = patches.shape().to_vec();
        if s.len() != 3 || s[2] != self.tokenizer.patch_len() {
            return Err(Error::dim(
                "embed",
                format!("patches {:?} for patch length {}", s, self.tokenizer.patch_len()),
            ));
        }
        let (n, nt) = (s[0], s[1]);
        if dates.len() != nt {
            return Err(Error::Data(format!("{} dates for {nt} temporal tokens", dates.len())));
        }
        let rows = dates
            .iter()
            .map(|&d| {
                if d == 0 || d > MAX_DAY_OF_YEAR {
                    Err(Error::Data(format!("day of year {d} outside [1, {MAX_DAY_OF_YEAR}]")))
                } else {
                    Ok(d as usize - 1)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens = self.projection.forward(g, g.tape().constant(patches))?;
        let pos = g.param(self.temporal_pos).gather_rows(&rows)?.expand_leading(&[n]);
        let tokens = tokens.add(&pos)?;
        if self.num_classes == 0 {
            return Ok(tokens);
        }
        let cls = g.param(self.class_tokens).expand_leading(&[n]);
        Var::concat(&[cls, tokens], 1)
    }

    pub fn embed<'t, S: Scalar>(&self, g: &Bound<'t, S>, sample: &SitsSample<S>) -> Result<Var<'t, S>> {
        let patches = patchify(sample.x(), &self.tokenizer)?;
        self.embed_and_prepend(g, patches, &self.patch_dates(sample.dates()))
    }

    /// All temporal layers, then the first `K` positions: `[N, K, d]`.
    pub fn temporal_encode<'t, S: Scalar>(&self, g: &Bound<'t, S>, z0: Var<'t, S>) -> Result<Var<'t, S>> {
        let mut z = z0;
        for layer in &self.layers {
            z = layer.forward(g, z, AttentionMode::SelfAttention)?;
        }
        self.class_slice(z)
    }

    pub fn class_slice<'t, S: Scalar>(&self, z: Var<'t, S>) -> Result<Var<'t, S>> {
        z.slice(1, 0, self.num_classes)
    }
}

/// Spatial position table, spatial encoder and segmentation head.
#[derive(Clone, Debug)]
pub struct SpatialStage {
    /// `N × d`
    pub spatial_pos: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    /// `d → h·w`, shared across classes.
    pub head: Linear,
    pub patch_h: usize,
    pub patch_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_classes: usize,
}

impl SpatialStage {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, cfg: &TsvitConfig) -> Result<Self> {
        let d = cfg.dim;
        let n = cfg.num_patches();
        let spatial_pos = store.add(format!("{name}.spatial_pos"), init::normal(rng, POSITION_STD, &[n, d]));
        let layers = (0..cfg.spatial_depth)
            .map(|l| EncoderLayerParams::new(store, rng, &format!("{name}.spatial.{l}"), d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let head = Linear::new(store, rng, &format!("{name}.head"), d, cfg.patch_h * cfg.patch_w, true);
        Ok(Self {
            spatial_pos,
            layers,
            head,
            patch_h: cfg.patch_h,
            patch_w: cfg.patch_w,
            grid_h: cfg.height / cfg.patch_h,
            grid_w: cfg.width / cfg.patch_w,
            num_classes: cfg.num_classes,
        })
    }

    /// `[N, K, d] → [K, N, d]` through the spatial encoder.
    pub fn spatial_encode<'t, S: Scalar>(&self, g: &Bound<'t, S>, cls: Var<'t, S>) -> Result<Var<'t, S>> {
        let s = cls.shape();
        let n = self.grid_h * self.grid_w;
        if s.len() != 3 || s[0] != n || s[1] != self.num_classes {
            return Err(Error::dim(
                "spatial_encode",
                format!("expected [{n}, {}, d] class tokens, got {:?}", self.num_classes, s),
            ));
        }
        let zs = cls.transpose(&[1, 0, 2])?;
        let pos = g.param(self.spatial_pos).expand_leading(&[s[1]]);
        let mut z = zs.add(&pos)?;
        for layer in &self.layers {
            z = layer.forward(g, z, AttentionMode::SelfAttention)?;
        }
        Ok(z)
    }

    /// `[K, N, d] → [H, W, K]` class probabilities.
    pub fn segmentation_head<'t, S: Scalar>(&self, g: &Bound<'t, S>, z: Var<'t, S>) -> Result<Var<'t, S>> {
        let k = self.num_classes;
        let (ph, pw, gh, gw) = (self.patch_h, self.patch_w, self.grid_h, self.grid_w);
        let pix = self.head.forward(g, z)?;
        let pix = pix.reshape(&[k, gh, gw, ph, pw])?;
        // (grid row, patch row, grid col, patch col, class)
        let map = pix.transpose(&[1, 3, 2, 4, 0])?;
        map.reshape(&[gh * ph, gw * pw, k])?.softmax_lastdim()
    }

    pub fn forward<'t, S: Scalar>(&self, g: &Bound<'t, S>, cls: Var<'t, S>) -> Result<Var<'t, S>> {
        let z = self.spatial_encode(g, cls)?;
        self.segmentation_head(g, z)
    }
}

/// Parameters of a single-stream TSViT.
#[derive(Clone, Debug)]
pub struct TsvitParams {
    pub config: TsvitConfig,
    pub branch: TemporalBranch,
    pub spatial: SpatialStage,
}

impl TsvitParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, cfg: &TsvitConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        let class_tokens = new_class_tokens(store, rng, cfg);
        let branch = TemporalBranch::new(store, rng, "branch0", cfg, channels, class_tokens)?;
        let spatial = SpatialStage::new(store, rng, "spatial", cfg)?;
        Ok(Self {
            config: cfg.clone(),
            branch,
            spatial,
        })
    }
}

/// Checks that a sample matches the grid the model was built for.
pub fn check_grid<S: Scalar>(cfg: &TsvitConfig, sample: &SitsSample<S>) -> Result<()> {
    let (t, h, w, _) = sample.dims();
    cfg.tokenizer(1).grid(t, h, w)?;
    if (h, w) != (cfg.height, cfg.width) {
        return Err(Error::Config(format!(
            "{}: grid {h}×{w} differs from the model's {}×{}",
            sample.modality, cfg.height, cfg.width
        )));
    }
    Ok(())
}

pub fn sm_tsvit_forward<'t, S: Scalar>(
    g: &Bound<'t, S>,
    p: &TsvitParams,
    sample: &SitsSample<S>,
) -> Result<Var<'t, S>> {
    check_grid(&p.config, sample)?;
    let z0 = p.branch.embed(g, sample)?;
    let cls = p.branch.temporal_encode(g, z0)?;
    p.spatial.forward(g, cls)
}
