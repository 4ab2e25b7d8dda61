//! The full forecaster: normalize → multi-scale patches → experts → gated
//! fusion → head → denormalize, applied per channel with shared weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SeriesWindow;
use crate::error::{Error, Result};
use crate::experts::{init_expert, run_expert, Dropout, ExpertKind, ExpertProfile};
use crate::fusion::{
    constant_gates, fuse, gate_weights, init_gate, init_head, init_projection, predict_head, project_expert,
    GateOverride, Gating,
};
use crate::numerics::{Bound, Graph, ParamStore, Real, Tensor, Var};
use crate::preprocess::{extract_branch, instance_normalize, resolve_scale, NormStats, PatchSpec, ScaleGeometry};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub pred_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub experts: Vec<ExpertProfile>,
    pub gate_hidden: usize,
    pub fusion_dim: usize,
    pub norm_eps: f64,
    pub gating: Gating,
}

impl Default for ModelConfig {
    fn default() -> Self {
        use crate::preprocess::ScaleFactor;
        Self {
            seq_len: 96,
            pred_len: 96,
            patch_len: 16,
            stride: 8,
            experts: vec![
                ExpertProfile::gpm(ScaleFactor::ONE),
                ExpertProfile::dsm(ScaleFactor { num: 1, den: 2 }),
            ],
            gate_hidden: 64,
            fusion_dim: 128,
            norm_eps: crate::preprocess::DEFAULT_NORM_EPS,
            gating: Gating::Adaptive,
        }
    }
}

impl ModelConfig {
    pub fn patch_spec(&self) -> PatchSpec {
        PatchSpec {
            patch_len: self.patch_len,
            stride: self.stride,
            scale_factors: self.experts.iter().map(|e| e.scale).collect(),
        }
    }

    /// Validates every dimension and resolves the per-expert patch geometry.
    pub fn validate(&self) -> Result<Vec<ScaleGeometry>> {
        if self.seq_len == 0 || self.pred_len == 0 {
            return Err(Error::Config("look-back window and horizon must be ≥ 1".into()));
        }
        if self.experts.is_empty() {
            return Err(Error::Config("at least one expert is required".into()));
        }
        if self.gate_hidden == 0 || self.fusion_dim == 0 {
            return Err(Error::Config("gate width and fusion width must be ≥ 1".into()));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("normalization eps must be positive".into()));
        }
        self.experts
            .iter()
            .enumerate()
            .map(|(j, e)| {
                e.validate().map_err(|err| Error::Config(format!("expert {j}: {err}")))?;
                resolve_scale(self.patch_len, self.stride, e.scale, self.seq_len)
                    .map_err(|err| Error::Config(format!("expert {j} (factor {}): {err}", e.scale)))
            })
            .collect()
    }
}

/// Normalized inputs, per-scale patches and (optionally) normalized targets
/// for a batch of channel-independent windows.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, L]`
    pub x_norm: Tensor,
    /// One `[B, N_j, P_j]` tensor per expert.
    pub patches: Vec<Tensor>,
    /// `[B, K]` targets normalized with each window's input statistics.
    pub targets: Option<Tensor>,
    pub stats: Vec<NormStats>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// Builds a batch from raw look-back slices and optional raw targets.
    pub fn build(inputs: &[&[f64]], targets: Option<&[&[f64]]>, geometries: &[ScaleGeometry], eps: f64) -> Result<Self> {
        let b = inputs.len();
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let l = inputs[0].len();
        if inputs.iter().any(|x| x.len() != l) {
            return Err(Error::Contract("windows in one batch must share a length".into()));
        }
        let mut x_norm = Vec::with_capacity(b * l);
        let mut patches: Vec<Vec<Real>> = geometries.iter().map(|g| Vec::with_capacity(b * g.count * g.patch_len)).collect();
        let mut stats = Vec::with_capacity(b);
        for x in inputs {
            let (normed, s) = instance_normalize(x, eps);
            for (buf, &g) in patches.iter_mut().zip(geometries) {
                let branch = extract_branch(&normed, g)?;
                buf.extend(branch.data().iter().map(|&v| v as Real));
            }
            x_norm.extend(normed.iter().map(|&v| v as Real));
            stats.push(s);
        }
        let patches = patches
            .into_iter()
            .zip(geometries)
            .map(|(data, g)| Tensor::new(vec![b, g.count, g.patch_len], data))
            .collect::<Result<Vec<_>>>()?;
        let targets = match targets {
            None => None,
            Some(ts) => {
                if ts.len() != b {
                    return Err(Error::Contract("targets and inputs differ in count".into()));
                }
                let k = ts[0].len();
                let mut data = Vec::with_capacity(b * k);
                for (t, s) in ts.iter().zip(&stats) {
                    if t.len() != k {
                        return Err(Error::Contract("targets in one batch must share a length".into()));
                    }
                    data.extend(t.iter().map(|&v| s.normalize_value(v) as Real));
                }
                Some(Tensor::new(vec![b, k], data)?)
            }
        };
        Ok(Self {
            x_norm: Tensor::new(vec![b, l], x_norm)?,
            patches,
            targets,
            stats,
        })
    }

    pub fn from_windows(windows: &[SeriesWindow<'_>], geometries: &[ScaleGeometry], eps: f64) -> Result<Self> {
        let inputs: Vec<&[f64]> = windows.iter().map(|w| w.input).collect();
        let targets: Vec<&[f64]> = windows.iter().map(|w| w.target).collect();
        Self::build(&inputs, Some(&targets), geometries, eps)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B, K]` forecast in normalized space.
    pub pred: Var,
    /// `[B, n]` expert weights.
    pub gates: Var,
}

/// Eval-mode forecast of a batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[B, K]` normalized forecast.
    pub normalized: Tensor,
    /// `[B, n]` expert weights.
    pub gates: Tensor,
}

impl Prediction {
    /// Forecast rows mapped back to each window's scale.
    pub fn denormalized(&self, stats: &[NormStats]) -> Vec<Vec<f64>> {
        let k = self.normalized.last_dim();
        self.normalized
            .data()
            .chunks(k)
            .zip(stats)
            .map(|(row, s)| row.iter().map(|&v| s.denormalize_value(v as f64)).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaMixT {
    config: ModelConfig,
    geometries: Vec<ScaleGeometry>,
    params: ParamStore,
}

impl AdaMixT {
    /// Freshly initialized model; all randomness comes from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let geometries = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (j, (e, &g)) in config.experts.iter().zip(&geometries).enumerate() {
            init_expert(&mut params, j, e, g, &mut rng);
        }
        for (j, (e, g)) in config.experts.iter().zip(&geometries).enumerate() {
            init_projection(&mut params, j, g.count * e.d_model, config.fusion_dim, &mut rng);
        }
        init_head(&mut params, config.fusion_dim, config.pred_len, &mut rng);
        // Last, so uniform and adaptive gating share every other initial value.
        if config.gating == Gating::Adaptive {
            init_gate(&mut params, config.seq_len, config.gate_hidden, config.experts.len(), &mut rng);
        }
        Ok(Self {
            config,
            geometries,
            params,
        })
    }

    /// Rebuilds a model around existing tensors; names and shapes must match
    /// what `config` would create.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut skeleton = Self::new(config, 0)?;
        skeleton.params.check_layout(&params)?;
        for (name, p) in params.iter() {
            *skeleton.params.get_mut(name).expect("layout checked") = p.value.clone();
        }
        Ok(skeleton)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometries(&self) -> &[ScaleGeometry] {
        &self.geometries
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn expert_count(&self) -> usize {
        self.config.experts.len()
    }

    pub fn batch(&self, windows: &[SeriesWindow<'_>]) -> Result<Batch> {
        Batch::from_windows(windows, &self.geometries, self.config.norm_eps)
    }

    pub fn batch_inputs(&self, inputs: &[&[f64]]) -> Result<Batch> {
        for x in inputs {
            if x.len() != self.config.seq_len {
                return Err(Error::Contract(format!(
                    "window of length {} given to a model with L = {}",
                    x.len(),
                    self.config.seq_len
                )));
            }
        }
        Batch::build(inputs, None, &self.geometries, self.config.norm_eps)
    }

    /// Records the forward pass of `batch` into `graph`.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        batch: &Batch,
        gate: GateOverride,
        drop: &mut Dropout<'_>,
    ) -> Result<ForwardVars> {
        let b = batch.len();
        let n = self.expert_count();
        let x = graph.constant(batch.x_norm.clone());
        let mut projected = Vec::with_capacity(n);
        for (j, (profile, &geometry)) in self.config.experts.iter().zip(&self.geometries).enumerate() {
            let patches = graph.constant(batch.patches[j].clone());
            let features = run_expert(graph, bound, j, profile, geometry, patches, drop)?;
            projected.push(project_expert(graph, bound, j, features)?);
        }
        let gates = match (gate, self.config.gating) {
            (GateOverride::OneHot(j), _) => {
                if j >= n {
                    return Err(Error::Contract(format!("one-hot gate {j} for {n} experts")));
                }
                let mut row = vec![0.0; n];
                row[j] = 1.0;
                constant_gates(graph, b, &row)
            }
            (GateOverride::Model, Gating::Adaptive) => gate_weights(graph, bound, x)?,
            (GateOverride::Model, Gating::Uniform) => constant_gates(graph, b, &vec![1.0 / n as Real; n]),
        };
        let fused = fuse(graph, &projected, gates)?;
        let pred = predict_head(graph, bound, fused)?;
        Ok(ForwardVars { pred, gates })
    }

    /// Eval-mode forward (no dropout, no gradients).
    pub fn predict_with(&self, batch: &Batch, gate: GateOverride) -> Result<Prediction> {
        let mut graph = Graph::new();
        let bound = self.bind_frozen(&mut graph);
        let out = self.forward(&mut graph, &bound, batch, gate, &mut Dropout::Off)?;
        Ok(Prediction {
            normalized: graph.value(out.pred).clone(),
            gates: graph.value(out.gates).clone(),
        })
    }

    pub fn predict(&self, batch: &Batch) -> Result<Prediction> {
        self.predict_with(batch, GateOverride::Model)
    }

    /// Denormalized forecasts for raw look-back windows.
    pub fn forecast(&self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let batch = self.batch_inputs(inputs)?;
        Ok(self.predict(&batch)?.denormalized(&batch.stats))
    }

    /// Binds every tensor as a constant so eval passes skip gradient
    /// bookkeeping.
    fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        self.params.bind_constants(graph)
    }

    /// Expert `j` alone, as a one-expert model with identical weights.
    pub fn single_expert(&self, j: usize) -> Result<AdaMixT> {
        let n = self.expert_count();
        if j >= n {
            return Err(Error::Contract(format!("expert {j} of {n}")));
        }
        let mut config = self.config.clone();
        config.experts = vec![self.config.experts[j].clone()];
        let mut single = AdaMixT::new(config, 0)?;
        let from = format!("expert.{j}.");
        let fusion = format!("fusion.{j}.");
        for (name, p) in self.params.iter() {
            let target = if let Some(rest) = name.strip_prefix(&from) {
                format!("expert.0.{rest}")
            } else if let Some(rest) = name.strip_prefix(&fusion) {
                format!("fusion.0.{rest}")
            } else if name.starts_with("head.") || name.starts_with("gate.l1") || name.starts_with("gate.l2") {
                name.to_owned()
            } else if name == "gate.l3.w" {
                let h = p.value.shape()[0];
                let col: Vec<Real> = (0..h).map(|r| p.value.data()[r * n + j]).collect();
                *single.params.get_mut(name).unwrap() = Tensor::new(vec![h, 1], col)?;
                continue;
            } else if name == "gate.l3.b" {
                *single.params.get_mut(name).unwrap() = Tensor::scalar(p.value.data()[j]);
                continue;
            } else {
                continue;
            };
            *single.params.get_mut(&target).unwrap() = p.value.clone();
        }
        Ok(single)
    }

    /// Names of tensors belonging to frozen backbones.
    pub fn frozen_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, _)| n.to_owned())
            .collect()
    }

    pub fn expert_kinds(&self) -> Vec<ExpertKind> {
        self.config.experts.iter().map(|e| e.kind).collect()
    }
}
