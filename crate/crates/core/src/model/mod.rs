//! Mixture-of-modality-experts masked autoencoder.
//!
//! Token sequence per sample: visible patch tokens of the first listed modality, its
//! end-of-modality token, then the next modality, and so on. Every token carries its modality id
//! and is routed with that modality's decision, so routing never depends on token content.

mod config;
mod layers;
mod pos;
mod routing;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, RoutingMode};
pub use layers::{Attention, FeedForward, Linear, Norm};
pub use pos::{sincos_1d, sincos_2d};
pub use routing::{route_with, router_input, softmax, topk_select, RoutingDecision};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::data::MultiModalSample;
use crate::error::{MapexError, Result};
use layers::Init;

#[derive(Clone, Debug)]
pub struct ModalityParams {
    pub embed: Linear,
    /// Learnable [MODALITY] embedding, shape `1×D`.
    pub token: ParamId,
    /// Learnable end-of-modality token, shape `1×D`.
    pub eom: ParamId,
    /// Decoder output head `decoder_dim → P·P·C`.
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    /// `D×e` router weights; absent under deterministic routing.
    pub router: Option<ParamId>,
    /// Retained experts keyed by their pretraining index, ascending.
    pub experts: Vec<(usize, FeedForward)>,
    pub shared: Option<FeedForward>,
    /// Decisions fixed at prune time, keyed by modality.
    pub frozen: BTreeMap<usize, RoutingDecision>,
}

impl MoeLayer {
    pub fn expert_ids(&self) -> Vec<usize> {
        self.experts.iter().map(|(i, _)| *i).collect()
    }

    fn local(&self, expert: usize) -> Option<usize> {
        self.experts.iter().position(|(i, _)| *i == expert)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub moe: MoeLayer,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub norm: Norm,
}

/// Which modalities and experts a model instance carries.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub modalities: Vec<usize>,
    /// Retained pretraining expert indices per layer.
    pub experts: Vec<Vec<usize>>,
}

impl Layout {
    pub fn full(config: &ModelConfig) -> Self {
        Layout {
            modalities: (0..config.num_modalities()).collect(),
            experts: vec![(0..config.experts).collect(); config.depth],
        }
    }
}

/// Downstream modality set and experts-per-modality.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneSpec {
    pub modalities: Vec<usize>,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneRecord {
    pub spec: PruneSpec,
    /// Per layer, retained pretraining expert indices; position in the list is the new index.
    pub remap: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct MapexModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub modalities: Vec<Option<ModalityParams>>,
    pub blocks: Vec<EncoderBlock>,
    pub norm: Norm,
    pub decoder: Decoder,
    pub prune: Option<PruneRecord>,
    /// When true, pruned models recompute routing from the router instead of frozen gates.
    pub live_routing: bool,
    pos_enc: Vec<Vec<f64>>,
    pos_dec: Vec<Vec<f64>>,
}

/// Per-row bookkeeping of an encoded token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenRow {
    pub sample: usize,
    pub modality: usize,
    /// Patch position, `None` for the end-of-modality token.
    pub position: Option<usize>,
}

/// What the encoder consumes for a batch.
pub struct EncodeRequest<'a> {
    pub samples: &'a [&'a MultiModalSample],
    /// Modalities in sequence order.
    pub modalities: &'a [usize],
    /// `visible[b][i]`: ascending visible positions of `modalities[i]` in sample `b`.
    pub visible: &'a [Vec<Vec<usize>>],
    /// Modalities whose tokens are replaced by zeros.
    pub zeroed: &'a [bool],
}

pub struct Encoded {
    pub out: Var,
    pub rows: Vec<TokenRow>,
    pub seg_len: usize,
    /// `decisions[layer][i]` for `modalities[i]`.
    pub decisions: Vec<Vec<RoutingDecision>>,
    /// Differentiable routing probabilities (`1×e`) per layer and listed modality, if learned.
    pub probs: Vec<Vec<Option<Var>>>,
    /// Evaluations per layer and pretraining expert index.
    pub expert_calls: Vec<Vec<usize>>,
    pub shared_calls: Vec<usize>,
}

pub struct Decoded {
    pub pred: Var,
    /// Tokens per decoder pass (one sample).
    pub seq_len: usize,
    pub mask_insertions: usize,
}

impl MapexModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let layout = Layout::full(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, &layout, Some(&mut rng))
    }

    /// Builds the parameter skeleton for `layout`; without an rng every value is zero.
    pub fn build(config: ModelConfig, layout: &Layout, rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        if layout.experts.len() != config.depth {
            return Err(MapexError::Contract("layout depth disagrees with config".into()));
        }
        let mut init = Init { rng };
        let mut store = ParamStore::new();
        let d = config.dim;
        let dd = config.decoder_dim;
        let token_std = 0.02;

        let mut embeds = BTreeMap::new();
        for &j in &layout.modalities {
            if j >= config.num_modalities() {
                return Err(MapexError::ModalityUnavailable(j));
            }
            let embed = Linear::new(&mut store, &mut init, &format!("embed.{j}"), config.patch_pixels(j), d, true);
            let token = store.add(format!("modality_token.{j}"), init.normal(&[1, d], token_std));
            let eom = store.add(format!("eom_token.{j}"), init.normal(&[1, d], 0.02));
            embeds.insert(j, (embed, token, eom));
        }

        let mut blocks = Vec::with_capacity(config.depth);
        for (l, retained) in layout.experts.iter().enumerate() {
            let name = format!("blocks.{l}");
            let norm1 = Norm::new(&mut store, &mut init, &format!("{name}.norm1"), d);
            let attn = Attention::new(&mut store, &mut init, &format!("{name}.attn"), d, config.heads);
            let norm2 = Norm::new(&mut store, &mut init, &format!("{name}.norm2"), d);
            let router = config.routing.is_learned().then(|| {
                let std = (2.0 / (d + config.experts) as f64).sqrt();
                store.add(format!("{name}.moe.router.w"), init.normal(&[d, config.experts], std))
            });
            let mut experts = Vec::with_capacity(retained.len());
            for &i in retained {
                if i >= config.experts {
                    return Err(MapexError::Contract(format!("expert {i} out of range")));
                }
                let ff = FeedForward::new(&mut store, &mut init, &format!("{name}.moe.expert.{i}"), d, config.expert_hidden);
                experts.push((i, ff));
            }
            let shared = config
                .shared_expert
                .then(|| FeedForward::new(&mut store, &mut init, &format!("{name}.moe.shared"), d, config.expert_hidden));
            blocks.push(EncoderBlock {
                norm1,
                attn,
                norm2,
                moe: MoeLayer { router, experts, shared, frozen: BTreeMap::new() },
            });
        }
        let norm = Norm::new(&mut store, &mut init, "norm", d);

        let dec_embed = Linear::new(&mut store, &mut init, "decoder.embed", d, dd, true);
        let mask_token = store.add("decoder.mask_token", init.normal(&[1, dd], 0.02));
        let mut dec_blocks = Vec::with_capacity(config.decoder_depth);
        for l in 0..config.decoder_depth {
            let name = format!("decoder.blocks.{l}");
            dec_blocks.push(DecoderBlock {
                norm1: Norm::new(&mut store, &mut init, &format!("{name}.norm1"), dd),
                attn: Attention::new(&mut store, &mut init, &format!("{name}.attn"), dd, config.decoder_heads),
                norm2: Norm::new(&mut store, &mut init, &format!("{name}.norm2"), dd),
                mlp: FeedForward::new(&mut store, &mut init, &format!("{name}.mlp"), dd, 2 * dd),
            });
        }
        let dec_norm = Norm::new(&mut store, &mut init, "decoder.norm", dd);

        let mut modalities = vec![None; config.num_modalities()];
        for (j, (embed, token, eom)) in embeds {
            let head = Linear::new(&mut store, &mut init, &format!("decoder.head.{j}"), dd, config.patch_pixels(j), true);
            modalities[j] = Some(ModalityParams { embed, token, eom, head });
        }

        let grid = config.grid();
        Ok(MapexModel {
            pos_enc: sincos_2d(grid, d),
            pos_dec: sincos_2d(grid, dd),
            config,
            store,
            modalities,
            blocks,
            norm,
            decoder: Decoder { embed: dec_embed, mask_token, blocks: dec_blocks, norm: dec_norm },
            prune: None,
            live_routing: false,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout {
            modalities: self.modality_ids(),
            experts: self.blocks.iter().map(|b| b.moe.expert_ids()).collect(),
        }
    }

    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn modality_ids(&self) -> Vec<usize> {
        (0..self.modalities.len()).filter(|&j| self.modalities[j].is_some()).collect()
    }

    pub fn has_modality(&self, j: usize) -> bool {
        self.modalities.get(j).is_some_and(|m| m.is_some())
    }

    fn modality(&self, j: usize) -> Result<&ModalityParams> {
        self.modalities.get(j).and_then(|m| m.as_ref()).ok_or(MapexError::ModalityUnavailable(j))
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_params_from(&mut self, other: &MapexModel) -> Result<()> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            let src = other
                .store
                .find(&name)
                .ok_or_else(|| MapexError::Contract(format!("source model lacks {name}")))?;
            let value = other.store.value(src);
            if value.shape() != self.store.value(id).shape() {
                return Err(MapexError::dim(format!("shape mismatch for {name}")));
            }
            *self.store.value_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Routing decision of `modality` at `layer`, computed from parameter values only.
    pub fn routing_decision(&self, layer: usize, modality: usize) -> Result<RoutingDecision> {
        let moe = &self.blocks[layer].moe;
        if !self.live_routing {
            if let Some(d) = moe.frozen.get(&modality) {
                return Ok(d.clone());
            }
        }
        let e = self.config.experts;
        match (self.config.routing, moe.router) {
            (RoutingMode::Deterministic, _) => Ok(RoutingDecision::deterministic(modality, e)),
            (mode, Some(router)) => {
                let token = self.store.value(self.modality(modality)?.token).data();
                let input = router_input(mode, modality, token);
                Ok(route_with(self.store.value(router).data(), &input, e, self.route_k(), modality))
            }
            (_, None) => Err(MapexError::Contract("learned routing without router weights".into())),
        }
    }

    /// Experts combined per modality: the training `k`, capped by the prune `k`.
    pub fn route_k(&self) -> usize {
        self.prune.as_ref().map_or(self.config.top_k, |p| p.spec.k.min(self.config.top_k))
    }

    /// Per-token routing entry point: the token is accepted but never inspected.
    pub fn route(&self, layer: usize, modality: usize, _token: &[f64]) -> Result<RoutingDecision> {
        self.routing_decision(layer, modality)
    }

    fn routing_in_graph(
        &self,
        g: &mut Graph,
        layer: usize,
        modality: usize,
    ) -> Result<(RoutingDecision, Option<Var>, Option<Var>)> {
        let moe = &self.blocks[layer].moe;
        let frozen = if self.live_routing { None } else { moe.frozen.get(&modality) };
        if let Some(d) = frozen {
            return Ok((d.clone(), None, None));
        }
        let e = self.config.experts;
        let (mode, router) = match (self.config.routing, moe.router) {
            (RoutingMode::Deterministic, _) => {
                return Ok((RoutingDecision::deterministic(modality, e), None, None));
            }
            (mode, Some(r)) => (mode, r),
            (_, None) => return Err(MapexError::Contract("learned routing without router weights".into())),
        };
        let input = match mode {
            RoutingMode::PosEmbed => {
                g.constant(Tensor::new(vec![1, self.config.dim], sincos_1d(modality as f64, self.config.dim))?)
            }
            _ => g.param(&self.store, self.modality(modality)?.token),
        };
        let w = g.param(&self.store, router);
        let logits = g.matmul(input, w)?;
        let probs = g.softmax(logits, 1)?;
        let pv = g.value(probs).data().to_vec();
        let (selected, gates) = topk_select(&pv, self.route_k());
        let picked = g.gather_cols(probs, &selected)?;
        let gate_var = g.normalize_sum(picked)?;
        Ok((RoutingDecision { modality, probs: pv, selected, gates }, Some(probs), Some(gate_var)))
    }

    fn patch_rows(&self, sample: &MultiModalSample, modality: usize, positions: &[usize], out: &mut Vec<f64>) {
        let p = self.config.patch_size;
        let grid = self.config.grid();
        let plane = sample.plane(modality);
        let (c, w) = (plane.shape()[0], plane.shape()[2]);
        let hw = plane.shape()[1] * w;
        let data = plane.data();
        for &pos in positions {
            let (py, px) = (pos / grid, pos % grid);
            for ch in 0..c {
                for dy in 0..p {
                    let row = ch * hw + (py * p + dy) * w + px * p;
                    out.extend_from_slice(&data[row..row + p]);
                }
            }
        }
    }

    /// Patch pixels of `modality` for every position, `T × P·P·C` (the reconstruction target).
    pub fn patchify(&self, sample: &MultiModalSample, modality: usize) -> Tensor {
        let t = self.config.tokens_per_modality();
        let all: Vec<usize> = (0..t).collect();
        let mut out = Vec::with_capacity(t * self.config.patch_pixels(modality));
        self.patch_rows(sample, modality, &all, &mut out);
        Tensor::new(vec![t, self.config.patch_pixels(modality)], out).expect("patch shape")
    }

    fn check_sample(&self, sample: &MultiModalSample, modality: usize) -> Result<()> {
        let plane = sample
            .planes
            .get(modality)
            .ok_or_else(|| MapexError::Data(format!("sample {} lacks modality {modality}", sample.id)))?;
        let s = plane.shape();
        let want = [self.config.modalities[modality].channels, self.config.image_size, self.config.image_size];
        if s != want {
            return Err(MapexError::dim(format!("modality {modality} plane {s:?}, expected {want:?}")));
        }
        Ok(())
    }

    /// Embeds the visible patches of one modality for every sample: `f^j(patch) + pos + [MODALITY]^j`.
    fn embed_modality(&self, g: &mut Graph, req: &EncodeRequest, i: usize) -> Result<Var> {
        let j = req.modalities[i];
        let mp = self.modality(j)?;
        let d = self.config.dim;
        let n: usize = req.visible.iter().map(|v| v[i].len()).sum();
        if req.zeroed[i] {
            return Ok(g.constant(Tensor::zeros(&[n, d])));
        }
        let ppc = self.config.patch_pixels(j);
        let mut pix = Vec::with_capacity(n * ppc);
        let mut pos = Vec::with_capacity(n * d);
        for (b, sample) in req.samples.iter().enumerate() {
            self.check_sample(sample, j)?;
            let vis = &req.visible[b][i];
            self.patch_rows(sample, j, vis, &mut pix);
            for &p in vis {
                pos.extend_from_slice(&self.pos_enc[p]);
            }
        }
        let x = g.constant(Tensor::new(vec![n, ppc], pix)?);
        let e = mp.embed.forward(g, &self.store, x)?;
        let pos = g.constant(Tensor::new(vec![n, d], pos)?);
        let e = g.add(e, pos)?;
        let tok = g.param(&self.store, mp.token);
        g.add_row(e, tok)
    }

    pub fn encode(&self, g: &mut Graph, req: &EncodeRequest) -> Result<Encoded> {
        let nb = req.samples.len();
        let nm = req.modalities.len();
        if nb == 0 || nm == 0 {
            return Err(MapexError::Contract("encode needs at least one sample and modality".into()));
        }
        if req.visible.len() != nb || req.zeroed.len() != nm || req.visible.iter().any(|v| v.len() != nm) {
            return Err(MapexError::Contract("encode request shapes disagree".into()));
        }
        let t = self.config.tokens_per_modality();
        for i in 0..nm {
            let count = req.visible[0][i].len();
            for v in req.visible {
                if v[i].len() != count || v[i].iter().any(|&p| p >= t) {
                    return Err(MapexError::Contract("visible sets must have equal size per modality and lie in range".into()));
                }
            }
        }
        let d = self.config.dim;

        // Per-modality blocks, then one permutation into sample-major order.
        let mut parts = Vec::with_capacity(2 * nm);
        let mut offsets = Vec::with_capacity(nm);
        let mut offset = 0;
        for i in 0..nm {
            let e = self.embed_modality(g, req, i)?;
            let eom = if req.zeroed[i] {
                g.constant(Tensor::zeros(&[nb, d]))
            } else {
                let p = g.param(&self.store, self.modality(req.modalities[i])?.eom);
                g.gather_rows(p, &vec![0; nb])?
            };
            let n = g.shape(e)[0];
            offsets.push((offset, offset + n));
            offset += n + nb;
            parts.push(e);
            parts.push(eom);
        }
        let cat = g.concat_rows(&parts)?;
        let mut perm = Vec::with_capacity(offset);
        let mut rows = Vec::with_capacity(offset);
        for b in 0..nb {
            for i in 0..nm {
                let count = req.visible[b][i].len();
                let (e_off, eom_off) = offsets[i];
                for (r, &p) in req.visible[b][i].iter().enumerate() {
                    perm.push(e_off + b * count + r);
                    rows.push(TokenRow { sample: b, modality: req.modalities[i], position: Some(p) });
                }
                perm.push(eom_off + b);
                rows.push(TokenRow { sample: b, modality: req.modalities[i], position: None });
            }
        }
        let seg_len = rows.len() / nb;
        let mut x = g.gather_rows(cat, &perm)?;

        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); nm];
        for (r, row) in rows.iter().enumerate() {
            let i = req.modalities.iter().position(|&m| m == row.modality).unwrap();
            groups[i].push(r);
        }
        let mut inverse = vec![0; rows.len()];
        let mut k = 0;
        for grp in &groups {
            for &r in grp {
                inverse[r] = k;
                k += 1;
            }
        }

        let mut decisions = Vec::with_capacity(self.blocks.len());
        let mut probs_all = Vec::with_capacity(self.blocks.len());
        let mut expert_calls = vec![vec![0; self.config.experts]; self.blocks.len()];
        let mut shared_calls = vec![0; self.blocks.len()];
        for (l, block) in self.blocks.iter().enumerate() {
            let h = block.norm1.forward(g, &self.store, x)?;
            let a = block.attn.forward(g, &self.store, h, seg_len)?;
            x = g.add(x, a)?;
            let h = block.norm2.forward(g, &self.store, x)?;

            let mut outs = Vec::with_capacity(nm);
            let mut layer_decisions = Vec::with_capacity(nm);
            let mut layer_probs = Vec::with_capacity(nm);
            for (i, &m) in req.modalities.iter().enumerate() {
                let (dec, probs, gates) = self.routing_in_graph(g, l, m)?;
                let xm = g.gather_rows(h, &groups[i])?;
                let mut acc: Option<Var> = None;
                for (s, &expert) in dec.selected.iter().enumerate() {
                    let local = block.moe.local(expert).ok_or_else(|| {
                        MapexError::Contract(format!("layer {l}: expert {expert} for modality {m} was pruned"))
                    })?;
                    expert_calls[l][expert] += 1;
                    let y = block.moe.experts[local].1.forward(g, &self.store, xm)?;
                    let y = match gates {
                        Some(gv) => {
                            let gate = g.slice(gv, 0, 1, s, 1)?;
                            g.scale_by(y, gate)?
                        }
                        None if dec.selected.len() == 1 && dec.gates[0] == 1.0 => y,
                        None => g.scale(y, dec.gates[s]),
                    };
                    acc = Some(match acc {
                        Some(prev) => g.add(prev, y)?,
                        None => y,
                    });
                }
                let mut ym = acc.ok_or_else(|| MapexError::Contract("routing selected no experts".into()))?;
                if let Some(shared) = &block.moe.shared {
                    shared_calls[l] += 1;
                    let s = shared.forward(g, &self.store, xm)?;
                    ym = g.add(ym, s)?;
                }
                outs.push(ym);
                layer_decisions.push(dec);
                layer_probs.push(probs);
            }
            let cat = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };
            let moe_out = g.gather_rows(cat, &inverse)?;
            x = g.add(x, moe_out)?;
            decisions.push(layer_decisions);
            probs_all.push(layer_probs);
        }
        let out = self.norm.forward(g, &self.store, x)?;
        Ok(Encoded { out, rows, seg_len, decisions, probs: probs_all, expert_calls, shared_calls })
    }

    /// Rebuilds the full token grid of one modality (visible encodings plus [MASK] tokens),
    /// runs the shared decoder and the modality's pixel head. One decoder pass per sample, all of
    /// length `T_j`; the end-of-modality token is not decoded.
    pub fn decode_modality(&self, g: &mut Graph, enc: &Encoded, modality: usize) -> Result<Decoded> {
        let mp = self.modality(modality)?;
        let t = self.config.tokens_per_modality();
        let dd = self.config.decoder_dim;
        let nb = enc.rows.iter().map(|r| r.sample).max().map_or(0, |m| m + 1);

        let mut vis_rows = Vec::new();
        let mut slot: Vec<Vec<Option<usize>>> = vec![vec![None; t]; nb];
        for (r, row) in enc.rows.iter().enumerate() {
            if row.modality != modality {
                continue;
            }
            if let Some(p) = row.position {
                if p >= t {
                    return Err(MapexError::Contract(format!("position {p} out of range")));
                }
                slot[row.sample][p] = Some(vis_rows.len());
                vis_rows.push(r);
            }
        }
        let n_vis = vis_rows.len();
        let n_mask = nb * t - n_vis;
        let vis = g.gather_rows(enc.out, &vis_rows)?;
        let vis = self.decoder.embed.forward(g, &self.store, vis)?;
        let mut perm = Vec::with_capacity(nb * t);
        let mut mask_count = 0;
        for per_sample in &slot {
            for s in per_sample {
                match s {
                    Some(v) => perm.push(*v),
                    None => {
                        perm.push(n_vis + mask_count);
                        mask_count += 1;
                    }
                }
            }
        }
        let seq = if n_mask > 0 {
            let mt = g.param(&self.store, self.decoder.mask_token);
            let masks = g.gather_rows(mt, &vec![0; n_mask])?;
            g.concat_rows(&[vis, masks])?
        } else {
            vis
        };
        let mut x = g.gather_rows(seq, &perm)?;
        let mut pos = Vec::with_capacity(nb * t * dd);
        for _ in 0..nb {
            for p in 0..t {
                pos.extend_from_slice(&self.pos_dec[p]);
            }
        }
        let pos = g.constant(Tensor::new(vec![nb * t, dd], pos)?);
        x = g.add(x, pos)?;
        for block in &self.decoder.blocks {
            let h = block.norm1.forward(g, &self.store, x)?;
            let a = block.attn.forward(g, &self.store, h, t)?;
            x = g.add(x, a)?;
            let h = block.norm2.forward(g, &self.store, x)?;
            let m = block.mlp.forward(g, &self.store, h)?;
            x = g.add(x, m)?;
        }
        let x = self.decoder.norm.forward(g, &self.store, x)?;
        let pred = mp.head.forward(g, &self.store, x)?;
        Ok(Decoded { pred, seq_len: t, mask_insertions: n_mask })
    }

    /// Average-pooled encoder output over the patch tokens of `active` modalities, `B×D`.
    /// Nothing is masked; end-of-modality tokens are excluded from the pool.
    pub fn pooled_features(&self, g: &mut Graph, samples: &[&MultiModalSample], active: &[usize]) -> Result<Var> {
        for &j in active {
            self.modality(j)?;
        }
        let t = self.config.tokens_per_modality();
        let visible = vec![vec![(0..t).collect::<Vec<_>>(); active.len()]; samples.len()];
        let zeroed = vec![false; active.len()];
        let req = EncodeRequest { samples, modalities: active, visible: &visible, zeroed: &zeroed };
        let enc = self.encode(g, &req)?;
        let rows = enc.rows.len();
        let mut pool = vec![0.0; samples.len() * rows];
        let w = 1.0 / (t * active.len()) as f64;
        for (r, row) in enc.rows.iter().enumerate() {
            if row.position.is_some() {
                pool[row.sample * rows + r] = w;
            }
        }
        let pool = g.constant(Tensor::new(vec![samples.len(), rows], pool)?);
        g.matmul(pool, enc.out)
    }

    /// Value-only [`pooled_features`](Self::pooled_features), evaluated in chunks.
    pub fn forward_features(&self, samples: &[&MultiModalSample], active: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut feats = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(32) {
            let mut g = Graph::new();
            let f = self.pooled_features(&mut g, chunk, active)?;
            let v = g.value(f);
            feats.extend((0..chunk.len()).map(|b| v.row(b).to_vec()));
        }
        Ok(feats)
    }

    /// Inserts the embedder and tokens of a modality taken from `full`, routing its tokens with the
    /// frozen decision of `route_as`. Used to feed a foreign modality through a pruned model.
    pub fn with_foreign_modality(&self, full: &MapexModel, modality: usize, route_as: usize) -> Result<MapexModel> {
        if self.has_modality(modality) {
            return Ok(self.clone());
        }
        let src = full.modality(modality)?;
        let mut out = self.clone();
        let mut copy = |id: ParamId| -> ParamId {
            let p = full.store.get(id);
            out.store.add(p.name.clone(), p.value.clone())
        };
        let embed = Linear { w: copy(src.embed.w), b: src.embed.b.map(&mut copy) };
        let token = copy(src.token);
        let eom = copy(src.eom);
        let head = Linear { w: copy(src.head.w), b: src.head.b.map(&mut copy) };
        out.modalities[modality] = Some(ModalityParams { embed, token, eom, head });
        for l in 0..out.blocks.len() {
            let dec = self.routing_decision(l, route_as)?;
            out.blocks[l].moe.frozen.insert(modality, RoutingDecision { modality, ..dec });
        }
        out.live_routing = false;
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
