//! Multi-modal fusion architectures over `M` co-registered streams.
//!
//! * **EF**: modalities stacked on the channel axis, one TSViT.
//! * **SCTF**: one temporal encoder per modality; after every layer the
//!   class tokens of all encoders are replaced by their mean.
//! * **CAF**: one temporal encoder per modality; each layer's attention for
//!   modality `j` uses the other modalities' queries against `j`'s keys.
//!
//! SCTF and CAF hand one mean-aggregated `[N, K, d]` class-token stream to
//! a single spatial encoder and head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tsvit::{check_grid, new_class_tokens, sm_tsvit_forward, SpatialStage, TemporalBranch, TsvitConfig, TsvitParams};
use crate::data::SitsSample;
use crate::error::{Error, Result};
use crate::nn::AttentionMode;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    /// Single modality, no fusion.
    #[serde(rename = "SM")]
    Single,
    #[serde(rename = "EF")]
    Early,
    #[serde(rename = "SCTF")]
    SyncClassToken,
    #[serde(rename = "CAF")]
    CrossAttention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Single,
        FusionMode::Early,
        FusionMode::SyncClassToken,
        FusionMode::CrossAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Single => "SM",
            FusionMode::Early => "EF",
            FusionMode::SyncClassToken => "SCTF",
            FusionMode::CrossAttention => "CAF",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SM" => Ok(FusionMode::Single),
            "EF" => Ok(FusionMode::Early),
            "SCTF" => Ok(FusionMode::SyncClassToken),
            "CAF" => Ok(FusionMode::CrossAttention),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?}; expected one of SM, EF, SCTF, CAF"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: FusionMode,
    pub tsvit: TsvitConfig,
    /// Modality ids in stream order.
    pub modalities: Vec<String>,
    /// Channel count per modality, same order.
    pub channels: Vec<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tsvit.validate()?;
        let m = self.modalities.len();
        if m == 0 {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if self.channels.len() != m {
            return Err(Error::Config(format!(
                "{} channel counts for {m} modalities",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be ≥ 1".into()));
        }
        let mut ids = self.modalities.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != m {
            return Err(Error::Config("modality ids must be unique".into()));
        }
        match self.mode {
            FusionMode::Single if m != 1 => Err(Error::Config(format!(
                "SM mode takes exactly one modality, got {m}"
            ))),
            FusionMode::CrossAttention if m < 2 => Err(Error::Config("CAF requires ≥ 2 modalities".into())),
            _ => Ok(()),
        }
    }
}

/// Architecture-specific parameter layout.
#[derive(Clone, Debug)]
pub enum MmParams {
    /// SM and EF: one stream.
    Single(TsvitParams),
    /// SCTF and CAF: one temporal branch per modality, shared spatial stage.
    Branched {
        branches: Vec<TemporalBranch>,
        spatial: SpatialStage,
    },
}

/// A configured architecture together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub arch: MmParams,
    pub store: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    /// Builds and seeds every parameter. Initialization order is fixed:
    /// branches in modality order, then the spatial stage.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let arch = match config.mode {
            FusionMode::Single | FusionMode::Early => {
                let channels = config.channels.iter().sum();
                MmParams::Single(TsvitParams::new(&mut store, &mut rng, &config.tsvit, channels)?)
            }
            FusionMode::SyncClassToken | FusionMode::CrossAttention => {
                let cls = new_class_tokens(&mut store, &mut rng, &config.tsvit);
                let branches = config
                    .channels
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| TemporalBranch::new(&mut store, &mut rng, &format!("branch{j}"), &config.tsvit, c, cls))
                    .collect::<Result<Vec<_>>>()?;
                let spatial = SpatialStage::new(&mut store, &mut rng, "spatial", &config.tsvit)?;
                MmParams::Branched { branches, spatial }
            }
        };
        Ok(Self { config, arch, store })
    }

    /// Class-probability map `[H, W, K]` on `g`, which must bind `self.store`.
    pub fn forward<'t>(&self, g: &Bound<'t, S>, samples: &[SitsSample<S>]) -> Result<Var<'t, S>> {
        mm_forward(&self.config, &self.arch, g, samples)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, samples: &[SitsSample<S>]) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let g = self.store.bind(&tape, false);
        let y = self.forward(&g, samples)?;
        Ok(y.value())
    }

    /// Picks this model's modalities out of a set, in configuration order.
    pub fn select<'a>(&self, available: &'a [SitsSample<S>]) -> Result<Vec<&'a SitsSample<S>>> {
        self.config
            .modalities
            .iter()
            .map(|id| {
                available
                    .iter()
                    .find(|s| &s.modality == id)
                    .ok_or_else(|| Error::Data(format!("modality {id} missing from input")))
            })
            .collect()
    }
}

/// Dispatches a forward pass to the configured architecture.
pub fn mm_forward<'t, S: Scalar>(
    config: &ModelConfig,
    arch: &MmParams,
    g: &Bound<'t, S>,
    samples: &[SitsSample<S>],
) -> Result<Var<'t, S>> {
    if samples.len() != config.modalities.len() {
        return Err(Error::Fusion(format!(
            "{} inputs for {} configured modalities",
            samples.len(),
            config.modalities.len()
        )));
    }
    for (s, (&c, id)) in samples.iter().zip(config.channels.iter().zip(&config.modalities)) {
        if s.dims().3 != c {
            return Err(Error::Fusion(format!(
                "modality {id}: {} channels, model expects {c}",
                s.dims().3
            )));
        }
    }
    match (config.mode, arch) {
        (FusionMode::Single, MmParams::Single(p)) => sm_tsvit_forward(g, p, &samples[0]),
        (FusionMode::Early, MmParams::Single(p)) => {
            let fused = early_fusion_concat(samples)?;
            sm_tsvit_forward(g, p, &fused)
        }
        (FusionMode::SyncClassToken, MmParams::Branched { branches, spatial }) => {
            sctf_forward(g, branches, spatial, &config.tsvit, samples)
        }
        (FusionMode::CrossAttention, MmParams::Branched { branches, spatial }) => {
            caf_forward(g, branches, spatial, &config.tsvit, samples)
        }
        (mode, _) => Err(Error::Config(format!("parameter layout does not match mode {mode}"))),
    }
}

/// Stacks modalities on the channel axis, in list order.
pub fn early_fusion_concat<S: Scalar>(samples: &[SitsSample<S>]) -> Result<SitsSample<S>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Fusion("early fusion of zero modalities".into()))?;
    if samples.len() == 1 {
        return Ok(first.clone());
    }
    let (t, h, w, _) = first.dims();
    for s in &samples[1..] {
        let (ts, hs, ws, _) = s.dims();
        for (axis, a, b) in [("T", t, ts), ("H", h, hs), ("W", w, ws)] {
            if a != b {
                return Err(Error::Fusion(format!(
                    "modality {} differs on axis {axis}: {b} vs {a} for {}",
                    s.modality, first.modality
                )));
            }
        }
        if s.dates() != first.dates() {
            return Err(Error::Data(format!(
                "modality {} acquisition dates differ from {}",
                s.modality, first.modality
            )));
        }
    }
    let total: usize = samples.iter().map(|s| s.dims().3).sum();
    let pixels = t * h * w;
    let mut data = Vec::with_capacity(pixels * total);
    for p in 0..pixels {
        for s in samples {
            let c = s.dims().3;
            data.extend_from_slice(&s.x().data()[p * c..(p + 1) * c]);
        }
    }
    let id = samples
        .iter()
        .map(|s| s.modality.as_str())
        .collect::<Vec<_>>()
        .join("+");
    SitsSample::new(id, Tensor::new(vec![t, h, w, total], data)?, first.dates().to_vec())
}

/// Element-wise mean of `M` equally shaped class-token tensors, summed in
/// list order. Forward passes call it with tokens sorted by modality id so
/// that reordering the inputs cannot change the rounding.
pub fn sctf_sync<'t, S: Scalar>(class_tokens: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let first = class_tokens
        .first()
        .ok_or_else(|| Error::Fusion("class-token sync over zero modalities".into()))?;
    let shape = first.shape();
    let mut sum = *first;
    for (j, c) in class_tokens.iter().enumerate().skip(1) {
        if c.shape() != shape {
            return Err(Error::Fusion(format!(
                "class tokens of modality {j} have shape {:?}, expected {:?}",
                c.shape(),
                shape
            )));
        }
        sum = sum.add(c)?;
    }
    let m = S::from_usize(class_tokens.len()).unwrap();
    Ok(sum.scale(S::one() / m))
}

fn embed_all<'t, S: Scalar>(
    g: &Bound<'t, S>,
    branches: &[TemporalBranch],
    cfg: &TsvitConfig,
    samples: &[SitsSample<S>],
) -> Result<Vec<Var<'t, S>>> {
    let mut grid = None;
    for s in samples {
        check_grid(cfg, s)?;
        let (t, h, w, _) = s.dims();
        match grid {
            None => grid = Some((t, h, w)),
            Some(g0) if g0 != (t, h, w) => {
                return Err(Error::Fusion(format!(
                    "modality {} token grid {:?} differs from {:?}",
                    s.modality,
                    (t, h, w),
                    g0
                )))
            }
            _ => {}
        }
    }
    branches.iter().zip(samples).map(|(b, s)| b.embed(g, s)).collect()
}

/// Stream indices sorted by modality id.
fn canonical_order<S: Scalar>(samples: &[SitsSample<S>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].modality.cmp(&samples[b].modality));
    order
}

fn class_mean<'t, S: Scalar>(streams: &[Var<'t, S>], order: &[usize], k: usize) -> Result<Var<'t, S>> {
    let cls: Vec<_> = order.iter().map(|&j| streams[j].slice(1, 0, k)).collect::<Result<_>>()?;
    sctf_sync(&cls)
}

/// Replaces the first `K` tokens of every stream by the cross-stream mean.
fn synchronize<'t, S: Scalar>(streams: &mut [Var<'t, S>], order: &[usize], k: usize) -> Result<()> {
    let synced = class_mean(streams, order, k)?;
    for z in streams.iter_mut() {
        let len = z.shape()[1];
        let rest = z.slice(1, k, len - k)?;
        *z = Var::concat(&[synced, rest], 1)?;
    }
    Ok(())
}

pub fn sctf_forward<'t, S: Scalar>(
    g: &Bound<'t, S>,
    branches: &[TemporalBranch],
    spatial: &SpatialStage,
    cfg: &TsvitConfig,
    samples: &[SitsSample<S>],
) -> Result<Var<'t, S>> {
    let k = cfg.num_classes;
    let order = canonical_order(samples);
    // streams start from the one shared class-token set, already in sync
    let mut z = embed_all(g, branches, cfg, samples)?;
    for l in 0..cfg.temporal_depth {
        for (zj, b) in z.iter_mut().zip(branches) {
            *zj = b.layers[l].forward(g, *zj, AttentionMode::SelfAttention)?;
        }
        synchronize(&mut z, &order, k)?;
    }
    // every stream now carries the same synchronized class tokens
    let cls = z[0].slice(1, 0, k)?;
    spatial.forward(g, cls)
}

pub fn caf_forward<'t, S: Scalar>(
    g: &Bound<'t, S>,
    branches: &[TemporalBranch],
    spatial: &SpatialStage,
    cfg: &TsvitConfig,
    samples: &[SitsSample<S>],
) -> Result<Var<'t, S>> {
    if branches.len() < 2 {
        return Err(Error::Config("CAF requires ≥ 2 modalities".into()));
    }
    let k = cfg.num_classes;
    let order = canonical_order(samples);
    // rank[j]: position of stream j among the sorted queries
    let mut rank = vec![0; order.len()];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r;
    }
    let mut z = embed_all(g, branches, cfg, samples)?;
    for l in 0..cfg.temporal_depth {
        let queries: Vec<_> = order
            .iter()
            .map(|&i| branches[i].layers[l].cross_queries(g, z[i]))
            .collect::<Result<_>>()?;
        let next: Vec<_> = z
            .iter()
            .zip(branches)
            .enumerate()
            .map(|(j, (zj, b))| {
                b.layers[l].forward(
                    g,
                    *zj,
                    AttentionMode::Cross {
                        queries: &queries,
                        index: rank[j],
                    },
                )
            })
            .collect::<Result<_>>()?;
        z = next;
    }
    spatial.forward(g, class_mean(&z, &order, k)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, c: usize, seed: f64) -> SitsSample<f64> {
        SitsSample::new(id, Tensor::from_fn(&[2, 2, 2, c], |i| (i as f64 * seed).sin()), vec![5, 15]).unwrap()
    }

    #[test]
    fn early_fusion_single_is_identity() {
        let a = sample("a", 2, 0.3);
        assert_eq!(early_fusion_concat(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn early_fusion_channel_layout() {
        let (a, b, c) = (sample("a", 2, 0.3), sample("b", 10, 0.7), sample("c", 4, 1.1));
        let f = early_fusion_concat(&[a.clone(), b.clone(), c]).unwrap();
        assert_eq!(f.dims().3, 16);
        for t in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    for ch in 0..10 {
                        assert_eq!(f.x().at(&[t, y, x, 2 + ch]), b.x().at(&[t, y, x, ch]));
                    }
                }
            }
        }
    }

    #[test]
    fn early_fusion_rejects_mismatch() {
        let a = sample("a", 2, 0.3);
        let b = SitsSample::new("b", Tensor::zeros(&[2, 3, 2, 1]), vec![5, 15]).unwrap();
        let err = early_fusion_concat(&[a.clone(), b]).unwrap_err().to_string();
        assert!(err.contains("axis H") && err.contains('b'), "{err}");
        let c = SitsSample::new("c", Tensor::zeros(&[2, 2, 2, 1]), vec![5, 16]).unwrap();
        assert!(matches!(early_fusion_concat(&[a, c]), Err(Error::Data(_))));
    }

    #[test]
    fn sync_is_arithmetic_mean() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 1, 2], vec![3.0, 5.0]).unwrap());
        assert_eq!(sctf_sync(&[a, b]).unwrap().value().data(), &[2.0, 4.0]);
        assert_eq!(sctf_sync(&[b, a]).unwrap().value().data(), &[2.0, 4.0]);
        assert_eq!(sctf_sync(&[a]).unwrap().value(), a.value());
        let c = tape.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(sctf_sync(&[a, c]), Err(Error::Fusion(_))));
    }

    fn tiny() -> TsvitConfig {
        TsvitConfig {
            patch_t: 1,
            patch_h: 2,
            patch_w: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            temporal_depth: 2,
            spatial_depth: 1,
            num_classes: 3,
            height: 4,
            width: 4,
        }
    }

    fn model(mode: FusionMode, ids: &[&str], channels: &[usize], seed: u64) -> Model<f64> {
        let config = ModelConfig {
            mode,
            tsvit: tiny(),
            modalities: ids.iter().map(|s| s.to_string()).collect(),
            channels: channels.to_vec(),
        };
        Model::new(config, seed).unwrap()
    }

    fn series(id: &str, c: usize, seed: f64) -> SitsSample<f64> {
        let x = Tensor::from_fn(&[3, 4, 4, c], |i| ((i as f64 + 1.0) * seed).sin());
        SitsSample::new(id, x, vec![20, 90, 200]).unwrap()
    }

    /// Copies every parameter of `src` into `dst`; `branch0.*` also fills
    /// every other branch.
    fn share_weights(src: &Model<f64>, dst: &mut Model<f64>) {
        let names: Vec<String> = dst.store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let from = match name.split_once('.') {
                Some((b, rest)) if b.starts_with("branch") => format!("branch0.{rest}"),
                _ => name.clone(),
            };
            dst.store.assign(&name, src.store.by_name(&from).unwrap().clone()).unwrap();
        }
    }

    #[test]
    fn single_modality_reductions_are_bit_exact() {
        let x = series("s2", 3, 0.37);
        let sm = model(FusionMode::Single, &["s2"], &[3], 5);
        let reference = sm.predict(std::slice::from_ref(&x)).unwrap();
        for mode in [FusionMode::Early, FusionMode::SyncClassToken] {
            let mut m = model(mode, &["s2"], &[3], 99);
            share_weights(&sm, &mut m);
            assert_eq!(m.predict(std::slice::from_ref(&x)).unwrap(), reference, "{mode}");
        }
    }

    #[test]
    fn cloned_modalities_reduce_to_single_stream() {
        let x = series("a", 2, 0.53);
        let y = SitsSample::new("b", x.x().clone(), x.dates().to_vec()).unwrap();
        let sm = model(FusionMode::Single, &["a"], &[2], 11);
        let reference = sm.predict(std::slice::from_ref(&x)).unwrap();
        let mut caf = model(FusionMode::CrossAttention, &["a", "b"], &[2, 2], 12);
        share_weights(&sm, &mut caf);
        let out = caf.predict(&[x.clone(), y.clone()]).unwrap();
        assert!(out.max_abs_diff(&reference) < 1e-10);
        let mut sctf = model(FusionMode::SyncClassToken, &["a", "b"], &[2, 2], 13);
        share_weights(&sm, &mut sctf);
        assert_eq!(sctf.predict(&[x, y]).unwrap(), reference);
    }

    #[test]
    fn permuting_modalities_leaves_output_unchanged() {
        let inputs = [series("s1", 2, 0.21), series("s2", 3, 0.47), series("pf", 1, 0.83)];
        for mode in [FusionMode::SyncClassToken, FusionMode::CrossAttention] {
            let m = model(mode, &["s1", "s2", "pf"], &[2, 3, 1], 3);
            let reference = m.predict(&inputs).unwrap();
            let MmParams::Branched { branches, spatial } = &m.arch else {
                panic!("branched layout expected")
            };
            for perm in [[2, 0, 1], [1, 2, 0], [0, 2, 1]] {
                let config = ModelConfig {
                    modalities: perm.iter().map(|&j| m.config.modalities[j].clone()).collect(),
                    channels: perm.iter().map(|&j| m.config.channels[j]).collect(),
                    ..m.config.clone()
                };
                let arch = MmParams::Branched {
                    branches: perm.iter().map(|&j| branches[j].clone()).collect(),
                    spatial: spatial.clone(),
                };
                let samples: Vec<_> = perm.iter().map(|&j| inputs[j].clone()).collect();
                let tape = Tape::new();
                let g = m.store.bind(&tape, false);
                let out = mm_forward(&config, &arch, &g, &samples).unwrap().value();
                assert!(out.max_abs_diff(&reference) < 1e-10, "{mode} {perm:?}");
            }
        }
    }

    #[test]
    fn every_branch_parameter_receives_gradient() {
        let inputs = [series("s1", 2, 0.21), series("s2", 3, 0.47), series("pf", 1, 0.83)];
        for mode in [FusionMode::SyncClassToken, FusionMode::CrossAttention] {
            let m = model(mode, &["s1", "s2", "pf"], &[2, 3, 1], 8);
            let tape = Tape::new();
            let g = m.store.bind(&tape, true);
            let y = m.forward(&g, &inputs).unwrap();
            let targets: Vec<usize> = (0..16).map(|p| p * 3 + p % 3).collect();
            let loss = y.pick(&targets).unwrap().ln_clamped(1e-12).mean().unwrap();
            let grads = g.collect_grads(&tape.backward(loss).unwrap());
            for (p, gr) in m.store.iter().zip(&grads) {
                let norm: f64 = gr.data().iter().map(|v| v * v).sum();
                assert!(norm > 0.0, "{mode}: {} has zero gradient", p.name);
            }
        }
    }

    #[test]
    fn modes_disagree_on_independent_weights() {
        let inputs = [series("a", 2, 0.3), series("b", 2, 0.9)];
        let outs: Vec<_> = [FusionMode::Early, FusionMode::SyncClassToken, FusionMode::CrossAttention]
            .iter()
            .map(|&mode| {
                let m = model(mode, &["a", "b"], &[2, 2], 21);
                let y = m.predict(&inputs).unwrap();
                assert_eq!(y.shape(), &[4, 4, 3]);
                y
            })
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(outs[i].max_abs_diff(&outs[j]) > 0.0);
            }
        }
    }

    #[test]
    fn configuration_errors() {
        let mut cfg = model(FusionMode::Early, &["a"], &[2], 0).config;
        cfg.mode = FusionMode::CrossAttention;
        let err = Model::<f64>::new(cfg, 0).unwrap_err().to_string();
        assert!(err.contains("CAF requires ≥ 2 modalities"), "{err}");
        let m = model(FusionMode::SyncClassToken, &["a", "b"], &[2, 2], 0);
        let bad = SitsSample::new("b", Tensor::zeros(&[2, 4, 4, 2]), vec![20, 90]).unwrap();
        assert!(matches!(m.predict(&[series("a", 2, 0.1), bad]), Err(Error::Fusion(_))));
    }

    #[test]
    fn branches_share_one_class_token_set() {
        for mode in FusionMode::ALL {
            let ids: &[&str] = if mode == FusionMode::Single { &["a"] } else { &["a", "b", "c"] };
            let m = model(mode, ids, &vec![2; ids.len()], 0);
            let names: Vec<_> = m.store.iter().filter(|p| p.name.contains("class_tokens")).map(|p| &p.name).collect();
            assert_eq!(names, ["class_tokens"], "{mode}");
        }
    }

    #[test]
    fn mode_parsing() {
        for m in FusionMode::ALL {
            assert_eq!(m.as_str().parse::<FusionMode>().unwrap(), m);
        }
        assert!("XF".parse::<FusionMode>().is_err());
    }
}
