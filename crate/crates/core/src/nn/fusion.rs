//! The triple-modal fusion network.
//!
//! Per modality: encoder MLP → linear projection to `d_uniform` → layer norm
//! → reshape into `n_tokens × token_dim` → intra-modal aggregation (multi-head
//! self-attention, residual, layer norm). Fusion then lets each modality's
//! queries attend to the tokens of its cyclic partner, concatenates that
//! hidden vector with the modality's own flattened tokens, mixes the pair
//! through a learnable `2·d → d` matrix, and concatenates the per-modality
//! results into the global feature fed to the classification head.
//!
//! Ablated architectures drop pieces: without aggregation the projected tokens
//! go straight to fusion; without cross-attention the flattened tokens are
//! concatenated; a single modality runs encoder → head directly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{Batch, Modality, ModalityWidths};
use crate::tensor::TensorError;

use super::attention::{AttentionSpec, MultiHeadAttention};
use super::layers::{LayerNorm, Linear, Mlp};
use super::params::{Initializer, ParamId, ParamStore};
use super::ModelError;

type Result<T> = std::result::Result<T, ModelError>;

/// Partner of modality `i` in the cross-attention cycle: `i mod 3 + 1`.
pub fn cyclic_partner(i: usize) -> Result<usize> {
    if !(1..=3).contains(&i) {
        return Err(ModelError::ModalityIndex(i));
    }
    Ok(i % 3 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_uniform: usize,
    pub n_heads: usize,
    pub n_tokens: usize,
    pub encoder_hidden: usize,
    pub head_hidden: usize,
    pub n_classes: usize,
    /// Query/key width of the fusion cross-attention; defaults to
    /// `d_uniform / n_heads`.
    pub key_width: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_uniform: 256,
            n_heads: 16,
            n_tokens: 16,
            encoder_hidden: 128,
            head_hidden: 128,
            n_classes: 2,
            key_width: None,
        }
    }
}

impl FusionConfig {
    /// Small enough for exhaustive finite-difference checks.
    pub fn micro() -> Self {
        Self {
            d_uniform: 16,
            n_heads: 4,
            n_tokens: 4,
            encoder_hidden: 6,
            head_hidden: 6,
            n_classes: 2,
            key_width: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("d_uniform", self.d_uniform),
            ("n_heads", self.n_heads),
            ("n_tokens", self.n_tokens),
            ("encoder_hidden", self.encoder_hidden),
            ("head_hidden", self.head_hidden),
            ("n_classes", self.n_classes),
            ("key_width", self.key_width.unwrap_or(1)),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.d_uniform.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_uniform {} is not divisible by n_heads {}",
                self.d_uniform, self.n_heads
            )));
        }
        if !self.d_uniform.is_multiple_of(self.n_tokens) {
            return Err(ModelError::InvalidConfig(format!(
                "d_uniform {} is not divisible by n_tokens {}",
                self.d_uniform, self.n_tokens
            )));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.d_uniform / self.n_tokens
    }

    pub fn head_dim(&self) -> usize {
        self.d_uniform / self.n_heads
    }

    pub fn key_dim(&self) -> usize {
        self.key_width.unwrap_or_else(|| self.head_dim())
    }
}

/// Which modalities are present and which fusion blocks are switched on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub modalities: Vec<Modality>,
    pub ima: bool,
    pub tcaf: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    /// Single modality: encoder output feeds the head.
    Direct,
    /// Flattened token grids concatenated.
    Concat,
    /// Cyclic cross-attention over the active modalities.
    CrossAttention,
}

impl Architecture {
    pub fn full() -> Self {
        Self {
            modalities: Modality::ALL.to_vec(),
            ima: true,
            tcaf: true,
        }
    }

    pub fn unimodal(m: Modality) -> Self {
        Self {
            modalities: vec![m],
            ima: false,
            tcaf: false,
        }
    }

    /// Normalizes the modality list to ascending index order.
    pub fn new(mut modalities: Vec<Modality>, ima: bool, tcaf: bool) -> Result<Self> {
        if modalities.is_empty() {
            return Err(ModelError::InvalidConfig("modality subset is empty".into()));
        }
        modalities.sort();
        if let Some(w) = modalities.windows(2).find(|w| w[0] == w[1]) {
            return Err(ModelError::DuplicateModality(w[0]));
        }
        Ok(Self { modalities, ima, tcaf })
    }

    pub fn fusion_kind(&self) -> FusionKind {
        match (self.modalities.len(), self.tcaf) {
            (1, _) => FusionKind::Direct,
            (_, true) => FusionKind::CrossAttention,
            (_, false) => FusionKind::Concat,
        }
    }

    /// Cross-attention partner among the active modalities: the next one in
    /// index order, wrapping around. With all three present this is
    /// [`cyclic_partner`].
    pub fn partner(&self, m: Modality) -> Result<Modality> {
        let pos = self
            .modalities
            .iter()
            .position(|&x| x == m)
            .ok_or(ModelError::MissingModality(m))?;
        Ok(self.modalities[(pos + 1) % self.modalities.len()])
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = self.modalities.iter().map(|m| m.name()).collect();
        format!(
            "{}{}{}",
            names.join("+"),
            if self.ima { "" } else { " -ima" },
            if self.tcaf { "" } else { " -tcaf" }
        )
    }
}

/// A modality's token grid, `[B × n_tokens × token_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct ModalityEmbedding {
    pub tokens: Var,
    pub modality: Modality,
}

pub struct CrossAttention {
    /// `[B × d_uniform]`.
    pub hidden: Var,
    /// `[B × n_tokens × n_tokens]`.
    pub weights: Var,
}

pub struct ForwardOutput {
    /// `[B × n_classes]`.
    pub logits: Var,
    /// `[B × fused width]`.
    pub f_global: Var,
    /// Post-projection, pre-aggregation `[B × d_uniform]` vectors used by the
    /// alignment loss; empty for the direct (single-modality) path.
    pub aligned: Vec<(Modality, Var)>,
}

#[derive(Debug, Clone)]
struct Projection {
    linear: Linear,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct Aggregation {
    attention: MultiHeadAttention,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct Branch {
    modality: Modality,
    encoder: Mlp,
    projection: Option<Projection>,
    ima: Option<Aggregation>,
}

#[derive(Debug, Clone)]
struct FusionUnit {
    modality: Modality,
    partner: Modality,
    attention: MultiHeadAttention,
    mix: ParamId,
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    config: FusionConfig,
    widths: ModalityWidths,
    arch: Architecture,
    params: ParamStore,
    branches: Vec<Branch>,
    fusion: Vec<FusionUnit>,
    head: Mlp,
}

impl FusionNet {
    pub fn new(config: FusionConfig, widths: ModalityWidths, arch: Architecture, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(arch.modalities, arch.ima, arch.tcaf)?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let d = config.d_uniform;
        let td = config.token_dim();
        let kind = arch.fusion_kind();

        let mut branches = Vec::with_capacity(arch.modalities.len());
        for &m in &arch.modalities {
            let encoder = Mlp::new(
                &mut params,
                &mut init,
                &format!("encoder.{m}"),
                widths.get(m),
                config.encoder_hidden,
                d,
            )?;
            let projection = if kind == FusionKind::Direct {
                None
            } else {
                Some(Projection {
                    linear: Linear::new(&mut params, &mut init, &format!("projection.{m}"), d, d, true)?,
                    norm: LayerNorm::new(&mut params, &format!("projection.{m}.norm"), d)?,
                })
            };
            let ima = if kind != FusionKind::Direct && arch.ima {
                let spec = AttentionSpec {
                    heads: config.n_heads,
                    key_dim: config.head_dim(),
                    value_dim: config.head_dim(),
                    query_in: td,
                    kv_in: td,
                    out_dim: Some(td),
                };
                Some(Aggregation {
                    attention: MultiHeadAttention::new(&mut params, &mut init, &format!("ima.{m}"), spec)?,
                    norm: LayerNorm::new(&mut params, &format!("ima.{m}.norm"), td)?,
                })
            } else {
                None
            };
            branches.push(Branch {
                modality: m,
                encoder,
                projection,
                ima,
            });
        }

        let mut fusion = Vec::new();
        if kind == FusionKind::CrossAttention {
            for &m in &arch.modalities {
                let spec = AttentionSpec {
                    heads: 1,
                    key_dim: config.key_dim(),
                    value_dim: td,
                    query_in: td,
                    kv_in: td,
                    out_dim: None,
                };
                let attention = MultiHeadAttention::new(&mut params, &mut init, &format!("tcaf.{m}"), spec)?;
                let mix = params.add(format!("tcaf.{m}.mix"), init.fan_in(&[2 * d, d], 2 * d))?;
                fusion.push(FusionUnit {
                    modality: m,
                    partner: arch.partner(m)?,
                    attention,
                    mix,
                });
            }
        }

        let head_in = match kind {
            FusionKind::Direct => d,
            _ => d * arch.modalities.len(),
        };
        let head = Mlp::new(&mut params, &mut init, "head", head_in, config.head_hidden, config.n_classes)?;

        Ok(Self {
            config,
            widths,
            arch,
            params,
            branches,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn widths(&self) -> &ModalityWidths {
        &self.widths
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Width of the fused representation fed to the head.
    pub fn fused_width(&self) -> usize {
        self.head.first.in_dim
    }

    fn branch(&self, m: Modality) -> Result<&Branch> {
        self.branches
            .iter()
            .find(|b| b.modality == m)
            .ok_or(ModelError::MissingModality(m))
    }

    /// Raw `[B × width(m)]` features → `[B × d_uniform]`.
    pub fn encode_modality(&self, g: &mut Graph, p: &[Var], m: Modality, raw: Var) -> Result<Var> {
        let branch = self.branch(m)?;
        let shape = g.shape(raw);
        let expected = self.widths.get(m);
        if shape.len() != 2 || shape[1] != expected {
            return Err(ModelError::WidthMismatch {
                what: format!("{m} input"),
                expected,
                found: shape.last().copied().unwrap_or(0),
            });
        }
        Ok(branch.encoder.forward(g, p, raw)?)
    }

    /// Linear map to `d_uniform`, layer norm, reshape to the token grid.
    /// Also returns the flat normalized `[B × d_uniform]` vector.
    pub fn project_and_normalize(
        &self,
        g: &mut Graph,
        p: &[Var],
        m: Modality,
        encoded: Var,
    ) -> Result<(ModalityEmbedding, Var)> {
        let proj = self.branch(m)?.projection.as_ref().ok_or(ModelError::InvalidConfig(format!(
            "{m} has no projection in a single-modality architecture"
        )))?;
        let d = self.config.d_uniform;
        let shape = g.shape(encoded).to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(ModelError::WidthMismatch {
                what: format!("{m} projection input"),
                expected: d,
                found: shape.last().copied().unwrap_or(0),
            });
        }
        let y = proj.linear.forward(g, p, encoded)?;
        let flat = proj.norm.forward(g, p, y, 1)?;
        let tokens = g.reshape(flat, &[shape[0], self.config.n_tokens, self.config.token_dim()])?;
        Ok((ModalityEmbedding { tokens, modality: m }, flat))
    }

    /// Multi-head self-attention over the modality's own tokens, residual,
    /// layer norm over the token features.
    pub fn ima_forward(&self, g: &mut Graph, p: &[Var], x: ModalityEmbedding) -> Result<ModalityEmbedding> {
        let block = self.branch(x.modality)?.ima.as_ref().ok_or(ModelError::InvalidConfig(format!(
            "intra-modal aggregation is disabled for {}",
            x.modality
        )))?;
        let attended = block.attention.forward(g, p, x.tokens, x.tokens)?;
        let residual = g.add(x.tokens, attended.output)?;
        let tokens = block.norm.forward(g, p, residual, 2)?;
        Ok(ModalityEmbedding {
            tokens,
            modality: x.modality,
        })
    }

    /// Queries from `x_i`, keys and values from its cyclic partner `x_j`.
    pub fn tcaf_cross_attention(
        &self,
        g: &mut Graph,
        p: &[Var],
        x_i: ModalityEmbedding,
        x_j: ModalityEmbedding,
    ) -> Result<CrossAttention> {
        let unit = self
            .fusion
            .iter()
            .find(|u| u.modality == x_i.modality)
            .ok_or(ModelError::MissingModality(x_i.modality))?;
        if unit.partner != x_j.modality {
            return Err(ModelError::PartnerMismatch {
                modality: x_i.modality.index(),
                partner: x_j.modality.index(),
                expected: unit.partner.index(),
            });
        }
        let out = unit.attention.forward(g, p, x_i.tokens, x_j.tokens)?;
        let b = g.shape(out.output)[0];
        let hidden = g.reshape(out.output, &[b, self.config.d_uniform])?;
        Ok(CrossAttention {
            hidden,
            weights: out.weights,
        })
    }

    /// `⊕_i W_i·(F_hidden^i ⊕ F_modality^i)` in modality order.
    pub fn tcaf_fuse(&self, g: &mut Graph, p: &[Var], embeddings: &[ModalityEmbedding]) -> Result<Var> {
        let ordered = self.order_embeddings(embeddings)?;
        let d = self.config.d_uniform;
        let mut parts = Vec::with_capacity(ordered.len());
        for unit in &self.fusion {
            let x_i = ordered[self.position(unit.modality)];
            let x_j = ordered[self.position(unit.partner)];
            let hidden = self.tcaf_cross_attention(g, p, x_i, x_j)?.hidden;
            let b = g.shape(x_i.tokens)[0];
            let own = g.reshape(x_i.tokens, &[b, d])?;
            let joined = g.concat(&[hidden, own], 1)?;
            parts.push(g.matmul(joined, p[unit.mix])?);
        }
        if parts.is_empty() {
            return Err(ModelError::InvalidConfig(
                "cross-attention fusion is disabled in this architecture".into(),
            ));
        }
        Ok(g.concat(&parts, 1)?)
    }

    /// Concatenation fallback used when cross-attention is switched off.
    pub fn concat_fuse(&self, g: &mut Graph, embeddings: &[ModalityEmbedding]) -> Result<Var> {
        let ordered = self.order_embeddings(embeddings)?;
        let d = self.config.d_uniform;
        let flat = ordered
            .iter()
            .map(|e| {
                let b = g.shape(e.tokens)[0];
                g.reshape(e.tokens, &[b, d])
            })
            .collect::<std::result::Result<Vec<_>, TensorError>>()?;
        Ok(g.concat(&flat, 1)?)
    }

    fn position(&self, m: Modality) -> usize {
        self.arch.modalities.iter().position(|&x| x == m).expect("active modality")
    }

    fn order_embeddings(&self, embeddings: &[ModalityEmbedding]) -> Result<Vec<ModalityEmbedding>> {
        let mut slots: Vec<Option<ModalityEmbedding>> = vec![None; self.arch.modalities.len()];
        for e in embeddings {
            let pos = self
                .arch
                .modalities
                .iter()
                .position(|&x| x == e.modality)
                .ok_or(ModelError::MissingModality(e.modality))?;
            if slots[pos].replace(*e).is_some() {
                return Err(ModelError::DuplicateModality(e.modality));
            }
        }
        slots
            .into_iter()
            .zip(&self.arch.modalities)
            .map(|(s, &m)| s.ok_or(ModelError::MissingModality(m)))
            .collect()
    }

    /// Two-layer head producing unnormalized class logits.
    pub fn classify(&self, g: &mut Graph, p: &[Var], f_global: Var) -> Result<Var> {
        let found = g.shape(f_global).last().copied().unwrap_or(0);
        if g.shape(f_global).len() != 2 || found != self.fused_width() {
            return Err(ModelError::WidthMismatch {
                what: "classifier input".into(),
                expected: self.fused_width(),
                found,
            });
        }
        Ok(self.head.forward(g, p, f_global)?)
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], batch: &Batch) -> Result<ForwardOutput> {
        let kind = self.arch.fusion_kind();
        let mut aligned = Vec::new();
        let mut embeddings = Vec::new();
        let mut direct = None;
        for branch in &self.branches {
            let m = branch.modality;
            let raw = g.constant(batch.input(m).clone());
            let encoded = self.encode_modality(g, p, m, raw)?;
            if kind == FusionKind::Direct {
                direct = Some(encoded);
                continue;
            }
            let (emb, flat) = self.project_and_normalize(g, p, m, encoded)?;
            aligned.push((m, flat));
            let emb = if branch.ima.is_some() {
                self.ima_forward(g, p, emb)?
            } else {
                emb
            };
            embeddings.push(emb);
        }
        let f_global = match kind {
            FusionKind::Direct => direct.expect("one branch"),
            FusionKind::Concat => self.concat_fuse(g, &embeddings)?,
            FusionKind::CrossAttention => self.tcaf_fuse(g, p, &embeddings)?,
        };
        let logits = self.classify(g, p, f_global)?;
        Ok(ForwardOutput {
            logits,
            f_global,
            aligned,
        })
    }

    /// Class probabilities `[B × n_classes]` without recording gradients.
    pub fn predict_proba(&self, batch: &Batch) -> Result<crate::Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &p, batch)?;
        let probs = g.softmax(out.logits, 1)?;
        Ok(g.value(probs).clone())
    }
}
