//! The assembled network: parameter registration, the per-batch training
//! forward that produces the weighted total loss, and inference.
//!
//! A batch is a list of video groups; each distinct video is encoded once
//! and all its queries ride on that encoding (the multi-pair sharing the
//! training loop and the throughput benchmark exploit). The inference
//! path reuses the same forward pieces: a query-independent video
//! representation (encoder, appearance prototypes, frame and activity
//! prototypes) plus a per-query grounding pass.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::apa;
use crate::avm::{self, ContrastTriplet, SharedProjector};
use crate::config::{ActivityQueryMode, ModelConfig, ThetaMode};
use crate::csm::{self, CsmDecoder};
use crate::encoders::{EncodedVideo, QueryEncoder, VideoEncoder};
use crate::error::{Error, Result};
use crate::feature_io::{Corpus, Segment};
use crate::fusion::{self, CoAttention, FloatPredictor, RinceDirection, SpanPredictor};
use crate::nn::{Bound, ParamStore};
use crate::opm;
use crate::tape::{Tape, Var};

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Loss components of one batch, as plain numbers for logging.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossBreakdown {
    pub contrast: f64,
    pub alignment: f64,
    pub span: f64,
    pub float_refine: f64,
    pub csm: f64,
    pub total: f64,
    pub threshold: f64,
}

pub struct BatchOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Rasterize a ground-truth segment (frame units) onto frame indices: the
/// start frame is the rounded start, the end frame the last frame the
/// segment reaches into, clamped to stay ordered and in range.
pub fn gt_frame_indices(seg: Segment, n_frames: usize) -> (usize, usize) {
    let last = n_frames as i64 - 1;
    let is = (seg.start.round() as i64).clamp(0, last);
    let ie = ((seg.end.round() as i64) - 1).clamp(is, last);
    (is as usize, ie as usize)
}

/// Weighted sum of the loss components per the ablation flags. Errors on
/// any non-finite component.
pub fn total_loss(
    tape: &mut Tape,
    contrast: Option<Var>,
    alignment: Option<Var>,
    span: Var,
    float_refine: Var,
    csm_aux: Option<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut named: Vec<(&str, Var, f64)> = Vec::new();
    if let Some(v) = contrast {
        named.push(("contrast", v, 1.0));
    }
    if let Some(v) = alignment {
        named.push(("alignment", v, cfg.weight_alignment));
    }
    named.push(("span", span, cfg.weight_span));
    named.push(("float", float_refine, cfg.weight_float));
    if let Some(v) = csm_aux {
        named.push(("csm", v, cfg.weight_csm));
    }

    let mut total = tape.scalar(0.0);
    for (name, var, weight) in named {
        let value = tape.scalar_value(var);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { component: name.to_string(), value });
        }
        let scaled = tape.scale(var, weight);
        total = tape.add(total, scaled);
    }
    let value = tape.scalar_value(total);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { component: "total".to_string(), value });
    }
    Ok(total)
}

struct Views {
    video_encoder: VideoEncoder,
    query_encoder: QueryEncoder,
    csm: CsmDecoder,
    shared: SharedProjector,
    opm: opm::OpmParams,
    apa: apa::ApaParams,
    coattention: CoAttention,
    span: SpanPredictor,
    float_head: FloatPredictor,
}

/// Query-independent products of one video within a tape.
pub struct VideoRepr {
    pub enc: EncodedVideo,
    /// Appearance prototypes per frame, `[N_a, d]` each (when prototypes
    /// are active).
    pub appearance: Vec<Var>,
    /// Activity prototypes `[K_e, d]` (learnable-query mode only at
    /// inference).
    pub activity: Option<Var>,
}

/// Per-pair inference output: scored fine segments (best first, frame
/// units) and the auxiliary regression head's segment.
#[derive(Debug, Clone)]
pub struct PairPrediction {
    pub spans: Vec<(Segment, f64)>,
    pub csm_span: Option<Segment>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        VideoEncoder::register(&mut store, seed, &cfg);
        QueryEncoder::register(&mut store, seed, &cfg);
        CsmDecoder::register(&mut store, seed, &cfg);
        SharedProjector::register(&mut store, seed, &cfg);
        opm::register(&mut store, seed, &cfg);
        apa::register(&mut store, seed, &cfg);
        CoAttention::register(&mut store, seed, &cfg);
        SpanPredictor::register(&mut store, seed, &cfg);
        FloatPredictor::register(&mut store, seed, &cfg);
        if cfg.rince_learnable {
            let logit = |p: f64| (p / (1.0 - p)).ln();
            store.add_scalar("fusion.rince.tau_raw", logit(cfg.rince_tau.min(0.999)));
            store.add_scalar("fusion.rince.alpha_raw", logit(cfg.rince_alpha.min(0.999)));
        }
        Ok(Model { cfg, params: store })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Self {
        Model { cfg, params }
    }

    /// Bundle config + parameters into one JSON file.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let bundle = serde_json::json!({
            "config": self.cfg,
            "params": self.params.to_json_value()?,
        });
        std::fs::write(path, serde_json::to_string(&bundle)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let bundle: serde_json::Value = serde_json::from_str(&text)?;
        let cfg: ModelConfig = serde_json::from_value(
            bundle
                .get("config")
                .cloned()
                .ok_or_else(|| Error::InvalidConfig("bundle missing config".into()))?,
        )?;
        cfg.validate()?;
        let params = ParamStore::from_json_value(
            bundle
                .get("params")
                .cloned()
                .ok_or_else(|| Error::InvalidConfig("bundle missing params".into()))?,
        )?;
        Ok(Model { cfg, params })
    }

    fn views(&self, bound: &Bound) -> Views {
        Views {
            video_encoder: VideoEncoder::bind(bound, &self.cfg),
            query_encoder: QueryEncoder::bind(bound),
            csm: CsmDecoder::bind(bound, &self.cfg),
            shared: SharedProjector::bind(bound, &self.cfg),
            opm: opm::bind(bound),
            apa: apa::bind(bound),
            coattention: CoAttention::bind(bound),
            span: SpanPredictor::bind(bound, &self.cfg),
            float_head: FloatPredictor::bind(bound),
        }
    }

    fn rince_tau_alpha(&self, tape: &mut Tape, bound: &Bound) -> (Var, Var) {
        if self.cfg.rince_learnable {
            let tau = tape.sigmoid(bound.var("fusion.rince.tau_raw"));
            let alpha = tape.sigmoid(bound.var("fusion.rince.alpha_raw"));
            (tau, alpha)
        } else {
            (tape.scalar(self.cfg.rince_tau), tape.scalar(self.cfg.rince_alpha))
        }
    }

    fn prototypes_active(&self) -> bool {
        self.cfg.ablations.opm || self.cfg.ablations.apa
    }

    /// Appearance prototypes for every frame of an encoded video.
    fn appearance_prototypes(&self, tape: &mut Tape, views: &Views, enc: &EncodedVideo) -> Vec<Var> {
        enc.frames
            .iter()
            .map(|&frame| {
                let w = views.opm.visual.weights(tape, frame);
                opm::aggregate_prototypes(tape, w, frame)
            })
            .collect()
    }

    /// Frame prototypes through the masked decoder, then activity
    /// prototypes from the given queries.
    fn activity_prototypes(
        &self,
        tape: &mut Tape,
        views: &Views,
        enc: &EncodedVideo,
        appearance: &[Var],
        activity_queries: Var,
    ) -> Result<Var> {
        let n_v = enc.frames.len();
        if n_v != self.cfg.frames_per_video {
            return Err(Error::ShapeMismatch(format!(
                "frame-query bank sized for {} frames, video has {n_v}",
                self.cfg.frames_per_video
            )));
        }
        let flat = tape.concat_rows(appearance);
        let mask = apa::build_frame_mask(n_v, self.cfg.appearance_prototypes);
        let frame_protos = views.apa.frame_decoder.apply(
            tape,
            views.apa.frame_queries,
            flat,
            &mask,
            enc.globals,
        );
        Ok(views.apa.activity_decoder.apply(tape, activity_queries, frame_protos))
    }

    /// Full training forward over a batch of groups; `progress` is the
    /// training fraction r in [0,1] driving the negative-selection
    /// threshold.
    pub fn batch_forward(
        &self,
        tape: &mut Tape,
        corpus: &Corpus,
        groups: &[(usize, Vec<usize>)],
        progress: f64,
    ) -> Result<BatchOutput> {
        let bound = self.params.bind(tape);
        self.batch_forward_bound(tape, &bound, corpus, groups, progress)
    }

    /// [`Self::batch_forward`] against an existing parameter binding, so
    /// callers can map gradients back to parameter names.
    pub fn batch_forward_bound(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        corpus: &Corpus,
        groups: &[(usize, Vec<usize>)],
        progress: f64,
    ) -> Result<BatchOutput> {
        let cfg = &self.cfg;
        let views = self.views(bound);
        let ab = cfg.ablations;

        // --- encode each distinct video once ---
        let mut video_enc: BTreeMap<usize, EncodedVideo> = BTreeMap::new();
        for &(v, _) in groups {
            if !video_enc.contains_key(&v) {
                let enc = views.video_encoder.apply(tape, &corpus.videos[v].grid);
                video_enc.insert(v, enc);
            }
        }

        // flattened pair list in group order
        let pairs: Vec<(usize, usize)> = groups
            .iter()
            .flat_map(|(v, ps)| ps.iter().map(move |&p| (*v, p)))
            .collect();
        let n_pairs = pairs.len();

        // --- encode queries ---
        let mut q_words = Vec::with_capacity(n_pairs);
        let mut q_sentence = Vec::with_capacity(n_pairs);
        for &(_, p) in &pairs {
            let enc = views.query_encoder.apply(tape, &corpus.queries[p].words);
            q_words.push(enc.words);
            q_sentence.push(enc.sentence);
        }

        // --- prototypes per video ---
        let mut appearance: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
        let mut activity: BTreeMap<usize, Var> = BTreeMap::new();
        if self.prototypes_active() {
            for (&v, enc) in &video_enc {
                appearance.insert(v, self.appearance_prototypes(tape, &views, enc));
            }
            if ab.apa {
                let queries = match cfg.activity_query_mode {
                    ActivityQueryMode::Learnable => views.apa.activity_queries,
                    ActivityQueryMode::BatchSentences => tape.concat_rows(&q_sentence),
                };
                for (&v, enc) in &video_enc {
                    let p_e = self.activity_prototypes(tape, &views, enc, &appearance[&v], queries)?;
                    activity.insert(v, p_e);
                }
            }
        }

        // --- cross-sentence mining ---
        let csm_aux = if ab.csm {
            let f_q = if n_pairs == 1 { q_sentence[0] } else { tape.concat_rows(&q_sentence) };
            let ranks: Vec<usize> = (0..n_pairs).collect();
            let mut memories = Vec::with_capacity(n_pairs);
            for (k, &(v, _)) in pairs.iter().enumerate() {
                let globals = video_enc[&v].globals;
                memories.push(tape.concat_rows(&[globals, q_words[k], q_sentence[k]]));
            }
            let decoded = views.csm.decode(tape, f_q, &ranks, &memories);
            let gt: Vec<(f64, f64)> = pairs
                .iter()
                .map(|&(_, p)| {
                    let s = corpus.gt_segment(p);
                    (s.start, s.end)
                })
                .collect();
            Some(csm::csm_loss(tape, decoded, &gt))
        } else {
            None
        };

        // --- adaptive video-query matching ---
        let phi = avm::threshold_schedule(progress, cfg);
        let contrast = if ab.avm {
            let mut pooled_video: BTreeMap<usize, Var> = BTreeMap::new();
            for (&v, enc) in &video_enc {
                let shared = views.shared.apply(tape, enc.globals);
                pooled_video.insert(v, avm::pooled_embedding(tape, shared));
            }
            let pooled_query: Vec<Var> = q_words
                .iter()
                .map(|&w| {
                    let shared = views.shared.apply(tape, w);
                    avm::pooled_embedding(tape, shared)
                })
                .collect();

            // selection scores on the current encoded features (held out of
            // the gradient: selection is a discrete choice)
            let w_s = tape.value(views.coattention.w_s).clone();
            let video_slots: Vec<usize> = video_enc.keys().copied().collect();
            let slot_of: BTreeMap<usize, usize> =
                video_slots.iter().enumerate().map(|(i, &v)| (v, i)).collect();
            let mut scores = Array2::zeros((video_slots.len(), n_pairs));
            for (i, &v) in video_slots.iter().enumerate() {
                let globals = tape.value(video_enc[&v].globals).clone();
                for (j, &wv) in q_words.iter().enumerate() {
                    scores[[i, j]] =
                        avm::pairwise_similarity(&globals, tape.value(wv), &w_s);
                }
            }
            let sim = avm::SimilarityMatrix::new(
                scores.clone(),
                video_slots.iter().map(|&v| corpus.video_ids[v].clone()).collect(),
                pairs.iter().map(|&(_, p)| corpus.pairs[p].id.clone()).collect(),
            );
            let original: Vec<Vec<usize>> = pairs
                .iter()
                .map(|&(v, _)| (0..video_slots.len()).filter(|&i| video_slots[i] != v).collect())
                .collect();
            let negatives = avm::select_negatives(&sim, phi, &original);

            // negative queries of a video: pairs of other videos scoring
            // under the threshold against it
            let mut neg_queries: Vec<Vec<usize>> = vec![Vec::new(); video_slots.len()];
            for (j, &(vq, _)) in pairs.iter().enumerate() {
                for (i, &v) in video_slots.iter().enumerate() {
                    if v != vq && scores[[i, j]] < phi {
                        neg_queries[i].push(j);
                    }
                }
            }

            let margin = cfg.contrast_margin.unwrap_or(phi);
            let mut triplets = Vec::new();
            for (j, &(v, _)) in pairs.iter().enumerate() {
                let slot = slot_of[&v];
                let nw = &neg_queries[slot];
                let nv = &negatives.per_query[j];
                let count = nw.len().max(nv.len());
                for k in 0..count {
                    let neg_query = (!nw.is_empty()).then(|| pooled_query[nw[k % nw.len()]]);
                    let neg_video =
                        (!nv.is_empty()).then(|| pooled_video[&video_slots[nv[k % nv.len()]]]);
                    let theta = match (cfg.theta_mode, neg_query, neg_video) {
                        (ThetaMode::MarginRatio, Some(nq), Some(nvv)) => avm::balance_theta_taped(
                            tape,
                            pooled_video[&v],
                            pooled_query[j],
                            nq,
                            nvv,
                            ThetaMode::MarginRatio,
                        ),
                        _ => tape.scalar(0.5),
                    };
                    triplets.push(ContrastTriplet {
                        pos_video: pooled_video[&v],
                        pos_query: pooled_query[j],
                        neg_query: if k < nw.len() { neg_query } else { None },
                        neg_video: if k < nv.len() { neg_video } else { None },
                        theta,
                    });
                }
            }
            Some(avm::contrastive_loss(tape, &triplets, margin))
        } else {
            None
        };

        // --- alignment loss over pair-level square similarity matrices ---
        let alignment = if (ab.opm || ab.apa) && n_pairs > 0 {
            let (tau, alpha) = self.rince_tau_alpha(tape, bound);
            let mut phrase_protos = Vec::with_capacity(n_pairs);
            if ab.opm {
                for &w in &q_words {
                    let wt = views.opm.textual.weights(tape, w);
                    phrase_protos.push(opm::aggregate_prototypes(tape, wt, w));
                }
            }
            let mut terms = Vec::new();
            if ab.opm {
                let mut cells = Vec::with_capacity(n_pairs * n_pairs);
                for &(v, _) in &pairs {
                    for pp in &phrase_protos {
                        cells.push(opm::object_phrase_similarity(tape, &appearance[&v], *pp));
                    }
                }
                terms.push(tape.stack_scalars(&cells, n_pairs, n_pairs));
            }
            if ab.apa {
                let mut cells = Vec::with_capacity(n_pairs * n_pairs);
                for &(v, _) in &pairs {
                    for &s in &q_sentence {
                        cells.push(apa::activity_sentence_similarity(tape, s, activity[&v]));
                    }
                }
                terms.push(tape.stack_scalars(&cells, n_pairs, n_pairs));
            }
            let mut sum = tape.scalar(0.0);
            for s in terms {
                for direction in [RinceDirection::RowWise, RinceDirection::ColumnWise] {
                    let l = fusion::rince_loss(tape, s, direction, tau, alpha)?;
                    sum = tape.add(sum, l);
                }
            }
            Some(sum)
        } else {
            None
        };

        // --- grounding head ---
        let mut span_sum = tape.scalar(0.0);
        let mut float_sum = tape.scalar(0.0);
        for (k, &(v, p)) in pairs.iter().enumerate() {
            let fused = views.coattention.apply(tape, video_enc[&v].globals, q_words[k]);
            let (p_s, p_e) = views.span.apply(tape, fused);
            let seg = corpus.gt_segment(p);
            let n_frames = corpus.videos[v].num_frames();
            let (gs, ge) = gt_frame_indices(seg, n_frames);
            let l2 = fusion::span_loss(tape, p_s, p_e, gs, ge)?;
            span_sum = tape.add(span_sum, l2);

            // offsets read the fused features at the ground-truth coarse
            // bounds during training; prediction uses the predicted ones
            let (o_s, o_e) = views.float_head.apply(tape, fused, gs, ge);
            let (fine_s, fine_e) = fusion::combine_boundaries_taped(tape, gs, ge, o_s, o_e);
            let l3 = fusion::float_loss(tape, fine_s, fine_e, seg.start, seg.end);
            float_sum = tape.add(float_sum, l3);
        }
        let span = tape.scale(span_sum, 1.0 / n_pairs.max(1) as f64);
        let float_refine = tape.scale(float_sum, 1.0 / n_pairs.max(1) as f64);

        let total = total_loss(tape, contrast, alignment, span, float_refine, csm_aux, cfg)?;
        let breakdown = LossBreakdown {
            contrast: contrast.map_or(0.0, |v| tape.scalar_value(v)),
            alignment: alignment.map_or(0.0, |v| tape.scalar_value(v)),
            span: tape.scalar_value(span),
            float_refine: tape.scalar_value(float_refine),
            csm: csm_aux.map_or(0.0, |v| tape.scalar_value(v)),
            total: tape.scalar_value(total),
            threshold: phi,
        };
        Ok(BatchOutput { total, breakdown })
    }

    /// Query-independent video representation (the part the multi-pair
    /// layout shares across a video's queries).
    pub fn video_repr(&self, tape: &mut Tape, bound: &Bound, video_grid: &ndarray::Array3<f64>) -> Result<VideoRepr> {
        let views = self.views(bound);
        let enc = views.video_encoder.apply(tape, video_grid);
        let mut appearance = Vec::new();
        let mut activity = None;
        if self.prototypes_active() {
            appearance = self.appearance_prototypes(tape, &views, &enc);
            if self.cfg.ablations.apa && matches!(self.cfg.activity_query_mode, ActivityQueryMode::Learnable) {
                activity =
                    Some(self.activity_prototypes(tape, &views, &enc, &appearance, views.apa.activity_queries)?);
            }
        }
        Ok(VideoRepr { enc, appearance, activity })
    }

    /// Ground every query of one video group against a shared video
    /// representation. `top_k` fine segments per query, plus the auxiliary
    /// regression segment when that head is enabled.
    pub fn predict_group(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        repr: &VideoRepr,
        words: &[&Array2<f64>],
        top_k: usize,
    ) -> Vec<PairPrediction> {
        let views = self.views(bound);
        let n = words.len();

        let encoded: Vec<_> = words.iter().map(|w| views.query_encoder.apply(tape, w)).collect();

        // auxiliary regression head over the whole group
        let csm_spans: Option<Vec<Segment>> = if self.cfg.ablations.csm {
            let sentences: Vec<Var> = encoded.iter().map(|e| e.sentence).collect();
            let f_q = if n == 1 { sentences[0] } else { tape.concat_rows(&sentences) };
            let ranks: Vec<usize> = (0..n).collect();
            let memories: Vec<Var> = encoded
                .iter()
                .map(|e| tape.concat_rows(&[repr.enc.globals, e.words, e.sentence]))
                .collect();
            let decoded = views.csm.decode(tape, f_q, &ranks, &memories);
            let v = tape.value(decoded);
            Some(
                (0..n)
                    .map(|j| {
                        let (s, e) = (v[[j, 0]], v[[j, 1]]);
                        Segment::new(s.min(e), s.max(e))
                    })
                    .collect(),
            )
        } else {
            None
        };

        let mut out = Vec::with_capacity(n);
        for (j, enc) in encoded.iter().enumerate() {
            let fused = views.coattention.apply(tape, repr.enc.globals, enc.words);
            let (p_s, p_e) = views.span.apply(tape, fused);
            let ps: Vec<f64> = tape.value(p_s).row(0).to_vec();
            let pe: Vec<f64> = tape.value(p_e).row(0).to_vec();
            let cells = fusion::top_k_spans(&ps, &pe, top_k);
            let spans = cells
                .into_iter()
                .map(|(s, e, score)| {
                    let (o_s, o_e) = views.float_head.apply(tape, fused, s, e);
                    let (fine_s, fine_e) = fusion::combine_boundaries(
                        s,
                        e,
                        tape.scalar_value(o_s),
                        tape.scalar_value(o_e),
                    );
                    (Segment::new(fine_s, fine_e), score)
                })
                .collect();
            out.push(PairPrediction { spans, csm_span: csm_spans.as_ref().map(|c| c[j]) });
        }
        out
    }
}
