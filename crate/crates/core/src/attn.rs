//! Single-head attention with hooks for capturing and substituting the
//! key/value tensors a layer computes.
//!
//! A layer computes `Softmax(Q·Kᵀ/√d)·V` with `Q = Z·W_q`, `K = C·W_k`,
//! `V = C·W_v`, where `Z` is the hidden state and `C` the condition (the
//! hidden state itself for self-attention, instruction tokens for
//! cross-attention). Only `K` and `V` are ever captured or injected; the
//! query always comes from the frame being denoised.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::numkit::checkpoint::{read_records, write_records};
use crate::numkit::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

pub type LayerId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttnKind {
    SelfAttn,
    Cross,
}

impl AttnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnKind::SelfAttn => "self",
            AttnKind::Cross => "cross",
        }
    }
}

/// Which classifier-free-guidance pass a forward belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    /// Image and instruction both dropped.
    Uncond,
    /// Image kept, instruction dropped.
    Image,
    /// Image and instruction kept.
    Full,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Uncond, Branch::Image, Branch::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Uncond => "uncond",
            Branch::Image => "image",
            Branch::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Branch::ALL.into_iter().find(|b| b.as_str() == s)
    }
}

/// Projection weights of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub id: LayerId,
    pub kind: AttnKind,
    /// Hidden dimension `d` shared by `Q`, `K` and `V`.
    pub dim: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttentionLayer {
    /// Registers `W_q: hidden_dim → dim` and `W_k, W_v: cond_dim → dim`.
    pub fn register(
        params: &mut ParamStore,
        prefix: &str,
        id: LayerId,
        kind: AttnKind,
        hidden_dim: usize,
        cond_dim: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let q_bound = (3.0 / hidden_dim as f32).sqrt();
        let kv_bound = (3.0 / cond_dim as f32).sqrt();
        Ok(Self {
            id,
            kind,
            dim,
            wq: params.insert(format!("{prefix}.wq"), Tensor::uniform([hidden_dim, dim], q_bound, rng))?,
            wk: params.insert(format!("{prefix}.wk"), Tensor::uniform([cond_dim, dim], kv_bound, rng))?,
            wv: params.insert(format!("{prefix}.wv"), Tensor::uniform([cond_dim, dim], kv_bound, rng))?,
        })
    }

    fn check_projections(&self, params: &ParamStore) -> Result<()> {
        for (name, id) in [("W_q", self.wq), ("W_k", self.wk), ("W_v", self.wv)] {
            let cols = params.get(id).as_matrix().1;
            ensure!(
                cols == self.dim,
                Dimension,
                "layer {} {name} maps to {cols} columns, expected d = {}",
                self.id,
                self.dim
            );
        }
        Ok(())
    }

    /// Records the layer into `g`. `hidden` is `n_q × hidden_dim` (a feature
    /// map is accepted as its row-major token matrix), `condition` is
    /// `n_k × cond_dim`. Capture and override behaviour comes from `ctl`.
    pub fn forward(&self, g: &mut Graph, hidden: Var, condition: Var, ctl: &mut AttnControl) -> Result<Var> {
        self.check_projections(g.params())?;
        let (wq, wk, wv) = (g.param(self.wq), g.param(self.wk), g.param(self.wv));
        let q = g.matmul(hidden, wq)?;
        let k = g.matmul(condition, wk)?;
        let v = g.matmul(condition, wv)?;
        ctl.record(self, g.value(k), g.value(v));

        let (k, v) = match ctl.override_for(self.id) {
            None => (k, v),
            Some(ov) => {
                ov.validate(self.dim)?;
                match ov.mode {
                    OverrideMode::Replace => (g.constant(ov.k)?, g.constant(ov.v)?),
                    OverrideMode::Extend if ov.k.as_matrix().0 == 0 => (k, v),
                    OverrideMode::Extend => {
                        let (ke, ve) = (g.constant(ov.k)?, g.constant(ov.v)?);
                        (g.concat_rows(k, ke)?, g.concat_rows(v, ve)?)
                    }
                }
            }
        };
        scaled_dot_product(g, q, k, v, self.dim)
    }
}

fn scaled_dot_product(g: &mut Graph, q: Var, k: Var, v: Var, dim: usize) -> Result<Var> {
    let logits = g.matmul_nt(q, k)?;
    let logits = g.scale(logits, 1.0 / (dim as f32).sqrt())?;
    let weights = g.softmax_rows(logits)?;
    g.matmul(weights, v)
}

/// Eval-mode forward of one layer on plain tensors.
pub fn attention_forward(
    layer: &AttentionLayer,
    params: &ParamStore,
    hidden: &Tensor,
    condition: &Tensor,
    ctl: &mut AttnControl,
) -> Result<Tensor> {
    let mut g = Graph::new(params, Mode::Eval);
    let h = g.constant(hidden.clone())?;
    let c = g.constant(condition.clone())?;
    let out = layer.forward(&mut g, h, c, ctl)?;
    Ok(g.value(out).clone())
}

/// Eval-mode forward with an explicit override for this layer.
pub fn attention_with_override(
    layer: &AttentionLayer,
    params: &ParamStore,
    hidden: &Tensor,
    condition: &Tensor,
    ov: &KvOverride,
) -> Result<Tensor> {
    let single = SingleOverride(layer.id, ov);
    let mut ctl = AttnControl::new(0, Branch::Full, 0).with_injector(&single);
    attention_forward(layer, params, hidden, condition, &mut ctl)
}

struct SingleOverride<'a>(LayerId, &'a KvOverride);

impl KvInjector for SingleOverride<'_> {
    fn kv_override(&self, layer: LayerId, _step: usize, _branch: Branch) -> Option<KvOverride> {
        (layer == self.0).then(|| self.1.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverrideMode {
    /// Use only the supplied keys/values.
    Replace,
    /// Append the supplied keys/values after the layer's own.
    Extend,
}

/// Keys/values to inject into one (layer, step) slot.
#[derive(Debug, Clone, PartialEq)]
pub struct KvOverride {
    pub mode: OverrideMode,
    pub k: Tensor,
    pub v: Tensor,
}

impl KvOverride {
    fn validate(&self, dim: usize) -> Result<()> {
        let (nk, dk) = self.k.as_matrix();
        let (nv, dv) = self.v.as_matrix();
        ensure!(
            self.k.rank() == 2 && self.v.rank() == 2,
            Dimension,
            "override K/V must be matrices"
        );
        ensure!(nk == nv, Dimension, "override K has {nk} tokens, V has {nv}");
        ensure!(dk == dim && dv == dim, Dimension, "override columns {dk}/{dv}, layer d = {dim}");
        if self.mode == OverrideMode::Replace {
            ensure!(nk > 0, Contract, "replace-mode override with no tokens");
        }
        Ok(())
    }
}

/// Source of per-slot overrides.
pub trait KvInjector: Sync {
    fn kv_override(&self, layer: LayerId, step: usize, branch: Branch) -> Option<KvOverride>;
}

/// Keys/values emitted by one layer during one forward.
#[derive(Debug, Clone, PartialEq)]
pub struct KvRecord {
    pub layer: LayerId,
    pub step: usize,
    pub frame: usize,
    pub branch: Branch,
    pub kind: AttnKind,
    pub k: Tensor,
    pub v: Tensor,
}

/// Records K/V for a fixed set of layers and sampler steps.
#[derive(Debug, Clone, Default)]
pub struct CaptureSession {
    layers: BTreeSet<LayerId>,
    steps: BTreeSet<usize>,
    records: Vec<KvRecord>,
}

impl CaptureSession {
    /// Arms capture on `layers` at `steps`; every layer must be in `known`.
    pub fn arm(known: &[LayerId], layers: &[LayerId], steps: impl IntoIterator<Item = usize>) -> Result<Self> {
        for l in layers {
            if !known.contains(l) {
                return Err(Error::Lookup(format!("unknown attention layer {l}")));
            }
        }
        Ok(Self {
            layers: layers.iter().copied().collect(),
            steps: steps.into_iter().collect(),
            records: Vec::new(),
        })
    }

    pub fn wants(&self, layer: LayerId, step: usize) -> bool {
        self.layers.contains(&layer) && self.steps.contains(&step)
    }

    pub fn records(&self) -> &[KvRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<KvRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Per-forward hook state: where in the trajectory we are, plus optional
/// capture and injection.
pub struct AttnControl<'a> {
    pub step: usize,
    pub branch: Branch,
    pub frame: usize,
    capture: Option<&'a mut CaptureSession>,
    injector: Option<&'a dyn KvInjector>,
}

impl<'a> AttnControl<'a> {
    pub fn new(step: usize, branch: Branch, frame: usize) -> Self {
        Self {
            step,
            branch,
            frame,
            capture: None,
            injector: None,
        }
    }

    /// No capture, no injection.
    pub fn passive() -> AttnControl<'static> {
        AttnControl::new(0, Branch::Full, 0)
    }

    pub fn with_capture(mut self, session: &'a mut CaptureSession) -> Self {
        self.capture = Some(session);
        self
    }

    pub fn with_injector(mut self, injector: &'a dyn KvInjector) -> Self {
        self.injector = Some(injector);
        self
    }

    fn record(&mut self, layer: &AttentionLayer, k: &Tensor, v: &Tensor) {
        if let Some(s) = self.capture.as_deref_mut() {
            if s.wants(layer.id, self.step) {
                s.records.push(KvRecord {
                    layer: layer.id,
                    step: self.step,
                    frame: self.frame,
                    branch: self.branch,
                    kind: layer.kind,
                    k: k.clone(),
                    v: v.clone(),
                });
            }
        }
    }

    fn override_for(&self, layer: LayerId) -> Option<KvOverride> {
        self.injector.and_then(|i| i.kv_override(layer, self.step, self.branch))
    }
}

/// The hook wiring for one frame's trajectory; the sampler turns it into an
/// [`AttnControl`] per step and branch.
#[derive(Default)]
pub struct FrameHooks<'a> {
    pub frame: usize,
    pub capture: Option<&'a mut CaptureSession>,
    pub injector: Option<&'a dyn KvInjector>,
}

impl<'a> FrameHooks<'a> {
    pub fn none(frame: usize) -> Self {
        Self {
            frame,
            capture: None,
            injector: None,
        }
    }

    pub fn control(&mut self, step: usize, branch: Branch) -> AttnControl<'_> {
        AttnControl {
            step,
            branch,
            frame: self.frame,
            capture: self.capture.as_deref_mut(),
            injector: self.injector,
        }
    }
}

/// Writes records as one file per (layer, step) under `dir`, using the
/// checkpoint framing with tensors named `frame{f:05}.{branch}.k|v`.
pub fn write_kv_store(dir: &Path, records: &[KvRecord]) -> Result<()> {
    let mut slots: BTreeMap<(LayerId, usize), Vec<&KvRecord>> = BTreeMap::new();
    for r in records {
        slots.entry((r.layer, r.step)).or_default().push(r);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for ((layer, step), recs) in slots {
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        for r in recs {
            let base = format!("frame{:05}.{}.{}", r.frame, r.branch.as_str(), r.kind.as_str());
            named.push((format!("{base}.k"), &r.k));
            named.push((format!("{base}.v"), &r.v));
        }
        let path = dir.join(kv_file_name(layer, step));
        write_records(&path, named.iter().map(|(n, t)| (n.as_str(), *t)))?;
    }
    Ok(())
}

pub fn kv_file_name(layer: LayerId, step: usize) -> String {
    format!("layer{layer:02}_step{step:02}.kv")
}

/// Reads every `layerLL_stepSS.kv` file in `dir` back into records.
pub fn read_kv_store(dir: &Path) -> Result<Vec<KvRecord>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "kv"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let (layer, step) = parse_slot(&stem).ok_or_else(|| Error::format(&path, "bad kv file name"))?;
        let records = read_records(&path)?;
        let mut iter = records.into_iter();
        while let Some((kname, k)) = iter.next() {
            let (vname, v) = iter.next().ok_or_else(|| Error::format(&path, "dangling K without V"))?;
            let parts: Vec<&str> = kname.split('.').collect();
            let ok = parts.len() == 4 && parts[3] == "k" && vname == format!("{}.v", &kname[..kname.len() - 2]);
            if !ok {
                return Err(Error::format(&path, format!("unexpected record pair {kname}/{vname}")));
            }
            let frame = parts[0]
                .strip_prefix("frame")
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::format(&path, "bad frame index"))?;
            let branch = Branch::parse(parts[1]).ok_or_else(|| Error::format(&path, "bad branch"))?;
            let kind = match parts[2] {
                "self" => AttnKind::SelfAttn,
                "cross" => AttnKind::Cross,
                _ => return Err(Error::format(&path, "bad attention kind")),
            };
            out.push(KvRecord {
                layer,
                step,
                frame,
                branch,
                kind,
                k,
                v,
            });
        }
    }
    Ok(out)
}

fn parse_slot(stem: &str) -> Option<(LayerId, usize)> {
    let rest = stem.strip_prefix("layer")?;
    let (l, s) = rest.split_once("_step")?;
    Some((l.parse().ok()?, s.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(n_tokens: usize, seed: u64) -> (ParamStore, AttentionLayer, Tensor) {
        let mut rng = Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let layer = AttentionLayer::register(&mut p, "a", 0, AttnKind::SelfAttn, 4, 4, 4, &mut rng).unwrap();
        let hidden = Tensor::randn([n_tokens, 4], &mut rng);
        (p, layer, hidden)
    }

    fn naive(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (nq, d) = q.as_matrix();
        let nk = k.as_matrix().0;
        let mut out = vec![0.0; nq * d];
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| {
                    (0..d).map(|c| f64::from(q.data()[i * d + c]) * f64::from(k.data()[j * d + c])).sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..d {
                out[i * d + c] = (0..nk).map(|j| w[j] / z * f64::from(v.data()[j * d + c])).sum();
            }
        }
        out
    }

    fn project(p: &ParamStore, x: &Tensor, id: ParamId) -> Tensor {
        x.matmul(p.get(id)).unwrap()
    }

    #[test]
    fn single_token_returns_its_value_row() {
        let (p, layer, hidden) = setup(1, 1);
        let out = attention_forward(&layer, &p, &hidden, &hidden, &mut AttnControl::passive()).unwrap();
        let v = project(&p, &hidden, layer.wv);
        assert!(out.max_abs_diff(&v) < 1e-6);
    }

    #[test]
    fn equal_keys_average_values() {
        let (p, layer, _) = setup(1, 2);
        let mut rng = Rng::seed_from_u64(9);
        let hidden = Tensor::randn([3, 4], &mut rng);
        let k_row = Tensor::randn([1, 4], &mut rng);
        let k = Tensor::concat_rows(&[&k_row, &k_row]).unwrap();
        let v = Tensor::randn([2, 4], &mut rng);
        let ov = KvOverride {
            mode: OverrideMode::Replace,
            k,
            v: v.clone(),
        };
        let out = attention_with_override(&layer, &p, &hidden, &hidden, &ov).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let mean = 0.5 * (v.data()[c] + v.data()[4 + c]);
                assert!((out.data()[r * 4 + c] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn random_case_matches_naive_oracle() {
        let (p, layer, hidden) = setup(4, 3);
        let out = attention_forward(&layer, &p, &hidden, &hidden, &mut AttnControl::passive()).unwrap();
        let q = project(&p, &hidden, layer.wq);
        let k = project(&p, &hidden, layer.wk);
        let v = project(&p, &hidden, layer.wv);
        for (a, b) in out.data().iter().zip(naive(&q, &k, &v)) {
            assert!((f64::from(*a) - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn replace_with_own_kv_is_vanilla() {
        let (p, layer, hidden) = setup(5, 4);
        let vanilla = attention_forward(&layer, &p, &hidden, &hidden, &mut AttnControl::passive()).unwrap();
        let ov = KvOverride {
            mode: OverrideMode::Replace,
            k: project(&p, &hidden, layer.wk),
            v: project(&p, &hidden, layer.wv),
        };
        let swapped = attention_with_override(&layer, &p, &hidden, &hidden, &ov).unwrap();
        assert!(swapped.max_abs_diff(&vanilla) <= 1e-6);
    }

    #[test]
    fn extend_with_nothing_is_exactly_vanilla() {
        let (p, layer, hidden) = setup(5, 5);
        let vanilla = attention_forward(&layer, &p, &hidden, &hidden, &mut AttnControl::passive()).unwrap();
        let ov = KvOverride {
            mode: OverrideMode::Extend,
            k: Tensor::zeros([0, 4]),
            v: Tensor::zeros([0, 4]),
        };
        let out = attention_with_override(&layer, &p, &hidden, &hidden, &ov).unwrap();
        assert_eq!(out, vanilla);
    }

    #[test]
    fn replace_with_other_frame_matches_manual_substitution() {
        let (p, layer, hidden) = setup(4, 6);
        let mut rng = Rng::seed_from_u64(60);
        let other = Tensor::randn([6, 4], &mut rng);
        let k = project(&p, &other, layer.wk);
        let v = project(&p, &other, layer.wv);
        let ov = KvOverride {
            mode: OverrideMode::Replace,
            k: k.clone(),
            v: v.clone(),
        };
        let out = attention_with_override(&layer, &p, &hidden, &hidden, &ov).unwrap();
        let q = project(&p, &hidden, layer.wq);
        for (a, b) in out.data().iter().zip(naive(&q, &k, &v)) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
        // Extend mode attends over [own; other].
        let ov = KvOverride {
            mode: OverrideMode::Extend,
            k: k.clone(),
            v: v.clone(),
        };
        let out = attention_with_override(&layer, &p, &hidden, &hidden, &ov).unwrap();
        let k_all = Tensor::concat_rows(&[&project(&p, &hidden, layer.wk), &k]).unwrap();
        let v_all = Tensor::concat_rows(&[&project(&p, &hidden, layer.wv), &v]).unwrap();
        for (a, b) in out.data().iter().zip(naive(&q, &k_all, &v_all)) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn override_errors() {
        let (p, layer, hidden) = setup(3, 7);
        let empty = KvOverride {
            mode: OverrideMode::Replace,
            k: Tensor::zeros([0, 4]),
            v: Tensor::zeros([0, 4]),
        };
        assert!(matches!(
            attention_with_override(&layer, &p, &hidden, &hidden, &empty),
            Err(Error::Contract(_))
        ));
        let wrong = KvOverride {
            mode: OverrideMode::Replace,
            k: Tensor::zeros([2, 3]),
            v: Tensor::zeros([2, 3]),
        };
        assert!(matches!(
            attention_with_override(&layer, &p, &hidden, &hidden, &wrong),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn capture_is_observation_only_and_appends() {
        let (p, layer, hidden) = setup(4, 8);
        let plain = attention_forward(&layer, &p, &hidden, &hidden, &mut AttnControl::passive()).unwrap();
        let mut session = CaptureSession::arm(&[0], &[0], [0]).unwrap();
        for _ in 0..2 {
            let mut ctl = AttnControl::new(0, Branch::Full, 3).with_capture(&mut session);
            let out = attention_forward(&layer, &p, &hidden, &hidden, &mut ctl).unwrap();
            assert_eq!(out, plain);
        }
        assert_eq!(session.len(), 2);
        assert_eq!(session.records()[0], session.records()[1]);
        assert_eq!(session.records()[0].frame, 3);

        let mut nothing = CaptureSession::arm(&[0], &[], [0]).unwrap();
        let mut ctl = AttnControl::new(0, Branch::Full, 0).with_capture(&mut nothing);
        attention_forward(&layer, &p, &hidden, &hidden, &mut ctl).unwrap();
        assert!(nothing.is_empty());

        assert!(matches!(CaptureSession::arm(&[0], &[5], [0]), Err(Error::Lookup(_))));
    }

    #[test]
    fn projection_width_mismatch_is_dimension_error() {
        let (mut p, mut layer, hidden) = setup(2, 9);
        layer.wv = p.insert("bad.wv", Tensor::zeros([4, 3])).unwrap();
        assert!(matches!(
            attention_forward(&layer, &p, &hidden, &hidden, &mut AttnControl::passive()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn kv_store_round_trip() {
        let mut rng = Rng::seed_from_u64(10);
        let records: Vec<KvRecord> = (0..3)
            .flat_map(|frame| {
                let k = Tensor::randn([4, 2], &mut rng);
                let v = Tensor::randn([4, 2], &mut rng);
                [(0, 1), (2, 0)].into_iter().map(move |(layer, step)| KvRecord {
                    layer,
                    step,
                    frame,
                    branch: Branch::Image,
                    kind: if layer == 0 { AttnKind::SelfAttn } else { AttnKind::Cross },
                    k: k.clone(),
                    v: v.clone(),
                })
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        write_kv_store(dir.path(), &records).unwrap();
        assert!(dir.path().join(kv_file_name(0, 1)).exists());
        let mut back = read_kv_store(dir.path()).unwrap();
        let key = |r: &KvRecord| (r.layer, r.step, r.frame);
        back.sort_by_key(key);
        let mut expected = records.clone();
        expected.sort_by_key(key);
        assert_eq!(back, expected);
    }
}
